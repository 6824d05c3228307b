"""Command-line driver: single runs, grid ladders and box-size sweeps.

Outputs (all written atomically into ``--out``):

``report.json``
    ``{system, mode, eps, box, levels: [{n, E, homo, iters, max_rank,
    seconds}], extrapolated: {E, homo}, order, converged}``
``trace_n{n}.csv``
    ``iter,orbital,lambda,rel_change,rank1,rank2,rank3`` per ladder level
``ladder.csv``
    ``n,E,homo,iters,max_rank,seconds``
``box_sweep.csv``
    ``L,n,E,rel_error`` (only with ``--box-sweep``)

Exit status: 0 converged, 1 not converged, 2 invalid input, 3 solver error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import extrapolation, scf
from .tucker import Grid

log = logging.getLogger(__name__)

ANGSTROM = 1.8897259886
AUTO_PROBE_BOX = 10.0
EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3

ELEMENTS = {
    "H": 1, "He": 2, "Li": 3, "Be": 4, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "Ne": 10,
    "Na": 11, "Mg": 12, "Al": 13, "Si": 14, "P": 15, "S": 16, "Cl": 17, "Ar": 18,
}
TRACE_COLUMNS = ["iter", "orbital", "lambda", "rel_change", "rank1", "rank2", "rank3"]
LADDER_COLUMNS = ["n", "E", "homo", "iters", "max_rank", "seconds"]


class InputError(ValueError):
    """Invalid configuration or geometry file."""


@dataclass
class RunConfig:
    geometry: str
    mode: str = "hf"
    eps: float = 1e-6
    box: float | str = "auto"
    grids: list = field(default_factory=lambda: [64, 128, 256])
    max_iter: int = 60
    mix_depth: int = scf.MIX_DEPTH
    mix_beta: float = scf.MIX_BETA
    seed: int = 0
    out: str = "out"
    cache_dir: str | None = None

    def __post_init__(self):
        self.mode = str(self.mode).lower()
        if self.mode in ("ks", "ks-lda"):
            self.mode = "lda"
        if self.mode not in scf.MODES:
            raise InputError(f"mode must be hf or lda, got {self.mode!r}")
        if not 1e-12 <= self.eps <= 1e-3:
            raise InputError(f"eps must lie in [1e-12, 1e-3], got {self.eps}")
        grids = [int(n) for n in self.grids]
        for n in grids:
            if n < 16 or n > 1024 or n & (n - 1):
                raise InputError(f"grid size {n} is not a power of two in [16, 1024]")
        if any(b <= a for a, b in zip(grids, grids[1:])) or not grids:
            raise InputError(f"grid sizes must be a non-empty increasing list, got {grids}")
        self.grids = grids
        if isinstance(self.box, str):
            if self.box.lower() == "auto":
                self.box = "auto"
            else:
                try:
                    self.box = float(self.box)
                except ValueError:
                    raise InputError(f"box must be a number or 'auto', got {self.box!r}") from None
        if self.box != "auto" and not self.box > 0:
            raise InputError(f"box half-width must be positive, got {self.box}")
        if self.max_iter < 0:
            raise InputError("max_iter must be non-negative")
        if self.mix_depth < 1:
            raise InputError("mix_depth must be at least 1")
        if not 0 < self.mix_beta <= 1:
            raise InputError("mix_beta must lie in (0, 1]")


def parse_geometry(path) -> scf.Molecule:
    """Read an XYZ-style file: atom count, a line naming the unit
    (``angstrom`` or ``bohr``), then ``symbol x y z`` rows."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not lines or not lines[0].strip():
        raise InputError(f"{path}:1: empty geometry file")
    try:
        count = int(lines[0].split()[0])
    except ValueError:
        raise InputError(f"{path}:1: expected the number of atoms, got {lines[0]!r}") from None
    if count < 1:
        raise InputError(f"{path}:1: atom count must be positive")
    if len(lines) < 2:
        raise InputError(f"{path}:2: missing unit line")
    words = lines[1].lower().split()
    if "angstrom" in words:
        factor = ANGSTROM
    elif "bohr" in words:
        factor = 1.0
    else:
        raise InputError(f"{path}:2: unit line must contain 'angstrom' or 'bohr'")
    rows = [(k + 3, ln) for k, ln in enumerate(lines[2:]) if ln.strip()]
    if len(rows) != count:
        raise InputError(f"{path}: expected {count} atom rows, found {len(rows)}")
    charges, positions = [], []
    for lineno, ln in rows:
        parts = ln.split()
        if len(parts) != 4:
            raise InputError(f"{path}:{lineno}: expected 'symbol x y z', got {ln.strip()!r}")
        sym = parts[0].capitalize()
        if sym not in ELEMENTS:
            raise InputError(f"{path}:{lineno}: unknown element {parts[0]!r}")
        try:
            xyz = [float(v) * factor for v in parts[1:]]
        except ValueError:
            raise InputError(f"{path}:{lineno}: malformed coordinates {ln.strip()!r}") from None
        charges.append(float(ELEMENTS[sym]))
        positions.append(xyz)
    total = int(sum(charges))
    name = path.stem
    if total == 1:
        return scf.Molecule(charges, positions, 1, 1.0, name)
    if total % 2:
        raise InputError(f"{path}: open-shell system with {total} electrons is not supported")
    return scf.Molecule.neutral(charges, positions, name)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] for c in columns])
    return buf.getvalue()


def trace_rows(report) -> list[dict]:
    return [{"iter": t["iter"], "orbital": t["orbital"], "lambda": repr(t["lambda"]),
             "rel_change": repr(t["rel_change"]), "rank1": t["ranks"][0],
             "rank2": t["ranks"][1], "rank3": t["ranks"][2]} for t in report.trace]


def resolve_box(config: RunConfig, mol: scf.Molecule) -> float:
    """Explicit half-width, or the HOMO-based heuristic from a coarse probe."""
    if config.box != "auto":
        return float(config.box)
    span = float(np.max(np.abs(mol.positions))) if len(mol.charges) else 0.0
    probe = scf.scf_solve(mol, Grid(AUTO_PROBE_BOX + span, config.grids[0]), config.mode,
                          max(config.eps, 1e-5), config.max_iter or 1, config.mix_depth,
                          config.mix_beta, config.seed, cache_dir=config.cache_dir)
    L = scf.box_heuristic(probe.homo, config.eps) + span
    log.info("auto box: HOMO %.6f from probe gives L = %.4f bohr", probe.homo, L)
    return L


def run(config: RunConfig) -> int:
    """Execute the ladder described by ``config`` and write all artifacts."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    mol = parse_geometry(config.geometry)
    L = resolve_box(config, mol)
    ladder = extrapolation.GridLadder(config.grids, L)
    extrapolation.run_ladder(mol, ladder, config.mode, config.eps, config.max_iter,
                             config.mix_depth, config.mix_beta, config.seed,
                             cache_dir=config.cache_dir)
    for rep in ladder.reports:
        _atomic_write(out / f"trace_n{rep.n}.csv", _csv_text(TRACE_COLUMNS, trace_rows(rep)))
    rows = ladder.rows()
    _atomic_write(out / "ladder.csv", _csv_text(LADDER_COLUMNS, rows))
    doc = {
        "system": mol.name, "mode": config.mode, "eps": config.eps, "box": L,
        "levels": rows,
        "extrapolated": {"E": ladder.extrapolated_energy, "homo": ladder.extrapolated_homo},
        "order": ladder.order, "converged": ladder.complete,
    }
    _atomic_write(out / "report.json", json.dumps(doc, indent=2, allow_nan=True) + "\n")
    return EXIT_OK if ladder.complete else EXIT_NOT_CONVERGED


def box_sweep(config: RunConfig, sizes, step: float) -> list[dict]:
    """Energies at several box half-widths with the grid step held fixed.

    Each half-width is snapped to a multiple of ``step`` so that ``h`` is
    exactly ``step`` and ``n = 2L/step`` is even; a nucleus at the origin then
    sits on a cell corner.  Rows report the snapped ``L``.  The relative error
    is taken against the largest box.
    """
    if not step > 0:
        raise InputError(f"grid step must be positive, got {step}")
    sizes = sorted({round(step * max(1, int(round(float(s) / step))), 12) for s in sizes})
    if len(sizes) < 2:
        raise InputError("a box sweep needs at least two distinct sizes")
    mol = parse_geometry(config.geometry)
    rows = []
    for L in sizes:
        n = int(round(2.0 * L / step))
        rep = scf.scf_solve(mol, Grid(L, n), config.mode, config.eps, config.max_iter,
                            config.mix_depth, config.mix_beta, config.seed,
                            cache_dir=config.cache_dir)
        rows.append({"L": L, "n": n, "E": rep.total, "converged": rep.converged})
    ref = rows[-1]["E"]
    for r in rows:
        r["rel_error"] = abs(r["E"] - ref) / abs(ref)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "box_sweep.csv", _csv_text(["L", "n", "E", "rel_error"], rows))
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tensorscf",
                                description="Grid-based HF / LDA solver in Tucker format")
    p.add_argument("--geometry", required=True, help="XYZ file with a unit line")
    p.add_argument("--mode", default="hf", choices=["hf", "lda"])
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--grids", default="64,128,256", help="comma-separated grid sizes")
    p.add_argument("--box", default="auto", help="box half-width in bohr, or 'auto'")
    p.add_argument("--max-iter", type=int, default=60)
    p.add_argument("--mix-depth", type=int, default=scf.MIX_DEPTH)
    p.add_argument("--mix-beta", type=float, default=scf.MIX_BETA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--cache-dir", default=None, help="directory for cached Newton kernels")
    p.add_argument("--box-sweep", default=None,
                   help="comma-separated half-widths; runs a box study instead of a ladder")
    p.add_argument("--step", type=float, default=0.2, help="grid step for --box-sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        grids = [int(x) for x in args.grids.split(",") if x.strip()]
        config = RunConfig(args.geometry, args.mode, args.eps, args.box, grids, args.max_iter,
                           args.mix_depth, args.mix_beta, args.seed, args.out, args.cache_dir)
        if args.box_sweep:
            sizes = [float(x) for x in args.box_sweep.split(",") if x.strip()]
            rows = box_sweep(config, sizes, args.step)
            return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED
        return run(config)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
