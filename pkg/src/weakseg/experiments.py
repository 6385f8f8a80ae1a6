"""Reproducible experiment runs with an on-disk result cache.

A run is a corpus recipe plus a :class:`~weakseg.trainer.TrainConfig`. Its
result (per-epoch metrics and best validation Dice) is cached under a key
derived from both and from a hash of the modules that influence training, so
editing the training code invalidates old results automatically.
"""
from __future__ import annotations

import ast
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data, trainer
from .bounds import BoundScheme
from .trainer import TrainConfig

# modules whose source affects training results
_TRAINING_MODULES = (
    "autodiff.py", "segnet.py", "losses.py", "bounds.py", "weak_labels.py",
    "lagrangian.py", "data.py", "optim.py", "trainer.py",
)


def _code_only(source: str) -> str:
    """AST dump with docstrings removed, so comment and doc edits keep the hash."""
    tree = ast.parse(source)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


def source_hash() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _TRAINING_MODULES:
        h.update(name.encode())
        h.update(_code_only((here / name).read_text()).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class CorpusSpec:
    """Generator overrides, corpus seed and weak-label strategy."""

    seed: int = 0
    weak: str = "erosion"
    weak_seed: int = 0
    overrides: tuple[tuple[str, object], ...] = ()

    @classmethod
    def make(cls, seed: int = 0, weak: str = "erosion", weak_seed: int = 0, **overrides) -> "CorpusSpec":
        return cls(seed, weak, weak_seed, tuple(sorted(overrides.items())))

    def params(self) -> data.GeneratorParams:
        return data.GeneratorParams(**dict(self.overrides))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "weak": self.weak, "weak_seed": self.weak_seed, **dict(self.overrides)}

    @classmethod
    def from_dict(cls, raw: dict) -> "CorpusSpec":
        raw = dict(raw)
        return cls.make(raw.pop("seed", 0), raw.pop("weak", "erosion"), raw.pop("weak_seed", 0), **raw)


_CORPORA: dict[CorpusSpec, data.Dataset] = {}


def corpus(spec: CorpusSpec) -> data.Dataset:
    """Generated (and weakened) corpus, memoised per process."""
    if spec not in _CORPORA:
        ds = data.generate_dataset(spec.params(), spec.seed)
        data.weaken(ds, spec.weak, spec.weak_seed)
        _CORPORA[spec] = ds
    return _CORPORA[spec]


@dataclass
class RunResult:
    name: str
    best_dice: float
    best_epoch: int
    final_dice: float
    records: list[dict] = field(default_factory=list)

    @property
    def curve(self) -> list[float]:
        return [r["val_dice"] for r in self.records]


def run_key(config: TrainConfig, spec: CorpusSpec) -> str:
    payload = json.dumps({"config": config.to_dict(), "corpus": spec.to_dict(), "src": source_hash()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def default_cache() -> Path:
    return Path(os.environ.get("WEAKSEG_CACHE", Path.cwd() / ".weakseg_cache"))


def run(
    name: str,
    config: TrainConfig,
    spec: CorpusSpec = CorpusSpec(),
    cache: str | Path | None = None,
    log=None,
) -> RunResult:
    """Train once, or load the cached result of an identical earlier run."""
    cache_dir = Path(cache) if cache is not None else default_cache()
    path = cache_dir / f"{run_key(config, spec)}.json"
    if path.exists():
        raw = json.loads(path.read_text())
        return RunResult(name, raw["best_dice"], raw["best_epoch"], raw["final_dice"], raw["records"])
    res = trainer.train(config, corpus(spec), log=log)
    out = RunResult(
        name, res.best_dice, res.best_epoch, res.records[-1].val_dice if res.records else float("nan"),
        [asdict(r) for r in res.records],
    )
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"name": name, "config": config.to_dict(), "corpus": spec.to_dict(),
                               "best_dice": out.best_dice, "best_epoch": out.best_epoch,
                               "final_dice": out.final_dice, "records": out.records}))
    tmp.replace(path)
    return out


# ---------------------------------------------------------------------------
# bound sweeps


def common_reference(ds: data.Dataset, group: int = 0, factors=(0.9, 1.1)) -> tuple[float, float]:
    """The common-bounds pair ``(a_c, b_c)`` for a corpus."""
    sizes = [s.true_size for s in ds.train if s.group == group and s.true_size > 0]
    return factors[0] * min(sizes), factors[1] * max(sizes)


def resolve_bound(token: str, tight: float) -> float:
    """``tight`` -> the common bound, ``5x`` -> five times it, otherwise a number of pixels."""
    token = token.strip()
    if token == "tight":
        return tight
    if token.endswith("x"):
        return float(token[:-1]) * tight
    return float(token)


def sweep_configs(
    ds: data.Dataset, lowers: Sequence[str], uppers: Sequence[str], base: TrainConfig
) -> list[tuple[str, str, TrainConfig]]:
    """Penalty runs with explicit common bounds for every (lower, upper) token pair."""
    a_c, b_c = common_reference(ds, base.bounds.reference_group)
    out = []
    for lo in lowers:
        for up in uppers:
            a, b = resolve_bound(lo, a_c), resolve_bound(up, b_c)
            scheme = BoundScheme("common", lower=a, upper=b, reference_group=base.bounds.reference_group)
            out.append((lo, up, replace(base, mode="penalty", bounds=scheme)))
    return out


# ---------------------------------------------------------------------------
# reporting


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row) + "\n")


def write_curves(out_dir: str | Path, results: Sequence[RunResult], title: str = "validation Dice") -> Path:
    """One CSV per run plus a gnuplot script plotting val Dice against epoch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plots = []
    for r in results:
        csv_path = out / f"{r.name}.csv"
        write_table(csv_path, trainer.CSV_HEADER, ([rec[k] for k in trainer.CSV_HEADER] for rec in r.records))
        plots.append(f"'{csv_path.name}' using 1:4 with lines title '{r.name}'")
    script = out / "curves.gp"
    script.write_text(
        "set datafile separator ','\n"
        "set key bottom right\n"
        f"set title '{title}'\n"
        "set xlabel 'epoch'\nset ylabel 'Dice'\n"
        "set terminal pngcairo size 900,600\n"
        "set output 'curves.png'\n"
        "plot " + ", \\\n     ".join(plots) + "\n"
    )
    return script


def majority(flags: Sequence[bool]) -> bool:
    return sum(bool(f) for f in flags) * 2 > len(flags)


def mean(values: Iterable[float]) -> float:
    return float(np.mean(list(values)))
