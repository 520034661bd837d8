"""Model zoo and factory."""
from __future__ import annotations

from ..errors import ConfigError
from .base import ENERGY, EXPLICIT, FIXED_POINT, Model, local_view
from .energy import EnergyGNN
from .explicit import GAT, GCN, gat_layer, gcn_layer
from .implicit import GSD, IGNN

MODEL_IDS = ("gcn", "gat", "ignn", "gsd", "energy-node", "energy-edge", "energy-attn")


def build_model(name: str, p: int, J: int, r: int = 0, **overrides) -> Model:
    """Construct a model by id.  ``overrides`` go to the constructor."""
    if name == "gcn":
        return GCN(p, J, r, **overrides)
    if name == "gat":
        return GAT(p, J, r, **overrides)
    if name == "ignn":
        return IGNN(p, J, r, **overrides)
    if name == "gsd":
        return GSD(p, J, r, **overrides)
    if name.startswith("energy-"):
        return EnergyGNN(p, J, r, variant=name.split("-", 1)[1], **overrides)
    raise ConfigError(f"unknown model {name!r}; choose from {', '.join(MODEL_IDS)}")


def model_from_config(cfg: dict) -> Model:
    cfg = dict(cfg)
    name = cfg.pop("model")
    p, J, r = cfg.pop("p"), cfg.pop("J"), cfg.pop("r", 0)
    cfg.pop("variant", None)
    for key in ("hidden", "msg_sizes", "upd_sizes"):
        if isinstance(cfg.get(key), list):
            cfg[key] = tuple(cfg[key]) if key != "hidden" or name != "gcn" else cfg[key]
    return build_model(name, p, J, r, **cfg)


__all__ = ["Model", "EnergyGNN", "GCN", "GAT", "IGNN", "GSD", "build_model", "model_from_config",
           "gcn_layer", "gat_layer", "local_view", "MODEL_IDS", "ENERGY", "EXPLICIT", "FIXED_POINT"]
