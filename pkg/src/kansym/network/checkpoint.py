"""Versioned JSON checkpoints holding every edge, parameter and grid range."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from kansym.basis import RbfBasis, SplineBasis
from kansym.errors import ConfigError
from kansym.gates import GatedEdge
from kansym.network.edges import (
    BasisEdge,
    EdgeFunction,
    EdgeKind,
    PrunedEdge,
    SymbolicEdgeFunction,
)
from kansym.network.model import KanLayer, KanModel
from kansym.oplib import AffineParams, FormId, get_form

CHECKPOINT_VERSION = 1


class EdgeRecord(BaseModel):
    layer: int
    out: int
    inp: int
    kind: EdgeKind
    params: list[float] = Field(default_factory=list)
    lo: float | None = None
    hi: float | None = None
    resolution: int | None = None
    degree: int | None = None
    centres: list[float] | None = None
    bandwidth: float | None = None
    form: FormId | None = None
    library: list[FormId] | None = None
    active: list[bool] | None = None
    n_scale: int | None = None


class Checkpoint(BaseModel):
    version: int = CHECKPOINT_VERSION
    n_inputs: int
    width: int
    n_mult: int
    hidden_mask: list[bool]
    edges: list[EdgeRecord]
    flagged: list[tuple[int, int, int]] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)


def _edge_record(eid: tuple[int, int, int], fn: EdgeFunction) -> EdgeRecord:
    rec = EdgeRecord(layer=eid[0], out=eid[1], inp=eid[2], kind=fn.kind,
                     params=fn.get_params().tolist())
    if isinstance(fn, BasisEdge):
        basis = fn.basis
        if isinstance(basis, SplineBasis):
            rec.lo, rec.hi = basis.lo, basis.hi
            rec.resolution, rec.degree = basis.resolution, basis.degree
        else:
            rec.centres = basis.centres.tolist()
            rec.bandwidth = basis.bandwidth
    elif isinstance(fn, SymbolicEdgeFunction):
        rec.form = fn.form.id
    elif isinstance(fn, GatedEdge):
        rec.library = [f.id for f in fn.library]
        rec.active = fn.active.tolist()
        rec.n_scale = int(fn.log_s.size)
    return rec


def _edge_function(rec: EdgeRecord) -> EdgeFunction:
    params = np.array(rec.params, dtype=float)
    if rec.kind is EdgeKind.PRUNED:
        return PrunedEdge()
    if rec.kind is EdgeKind.SPLINE:
        if rec.lo is None or rec.hi is None or rec.resolution is None:
            raise ConfigError("spline edge record lacks its grid")
        return BasisEdge(SplineBasis(rec.lo, rec.hi, rec.resolution,
                                     rec.degree if rec.degree is not None else 3,
                                     coefficients=params))
    if rec.kind is EdgeKind.RBF:
        if rec.centres is None or rec.bandwidth is None:
            raise ConfigError("RBF edge record lacks its centres")
        return BasisEdge(RbfBasis(np.array(rec.centres), rec.bandwidth, params))
    if rec.kind is EdgeKind.SYMBOLIC:
        if rec.form is None:
            raise ConfigError("symbolic edge record lacks its form")
        return SymbolicEdgeFunction(get_form(rec.form), AffineParams.from_array(params))
    library = [get_form(f) for f in rec.library or []]
    edge = GatedEdge(library, log_s=np.zeros(rec.n_scale or 1), active=rec.active)
    edge.set_params(params)
    return edge


def to_checkpoint(model: KanModel,
                  metadata: dict[str, Any] | None = None) -> Checkpoint:
    return Checkpoint(
        n_inputs=model.n_inputs,
        width=model.width,
        n_mult=model.n_mult,
        hidden_mask=model.hidden_mask.tolist(),
        edges=[_edge_record(eid, model.edge(eid)) for eid in model.edge_ids()],
        flagged=sorted(model.flagged),
        metadata=metadata or {},
    )


def from_checkpoint(ckpt: Checkpoint) -> KanModel:
    if ckpt.version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ckpt.version}")
    n_sub = ckpt.width + 2 * ckpt.n_mult
    n_hidden = ckpt.width + ckpt.n_mult
    grid: list[list[list[EdgeFunction]]] = [
        [[PrunedEdge() for _ in range(ckpt.n_inputs)] for _ in range(n_sub)],
        [[PrunedEdge() for _ in range(n_hidden)]],
    ]
    for rec in ckpt.edges:
        grid[rec.layer][rec.out][rec.inp] = _edge_function(rec)
    model = KanModel(ckpt.n_inputs, ckpt.width, ckpt.n_mult,
                     [KanLayer(rows) for rows in grid],
                     hidden_mask=np.array(ckpt.hidden_mask, dtype=bool))
    model.flagged = {tuple(e) for e in ckpt.flagged}  # type: ignore[misc]
    return model


def save_checkpoint(model: KanModel, path: str | Path,
                    metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.write_text(to_checkpoint(model, metadata).model_dump_json(indent=1))
    return path


def load_checkpoint(path: str | Path) -> tuple[KanModel, dict[str, Any]]:
    try:
        ckpt = Checkpoint.model_validate_json(Path(path).read_text())
    except ValueError as e:
        raise ConfigError(f"invalid checkpoint {path}: {e}") from e
    return from_checkpoint(ckpt), ckpt.metadata
