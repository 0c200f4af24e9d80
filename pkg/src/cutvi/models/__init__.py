"""Built-in models: biased-normal, HPV and agricultural."""

from cutvi.models.agri import AgriData, AgriModel, build_agri
from cutvi.models.biased_normal import BiasedNormalModel, build_biased_normal
from cutvi.models.hpv import HpvModel, build_hpv
from cutvi.models.toy import ToyDiscreteModel

REGISTRY = {
    "biased-normal": BiasedNormalModel,
    "hpv": HpvModel,
    "agri": AgriModel,
}

__all__ = [
    "AgriData",
    "AgriModel",
    "BiasedNormalModel",
    "HpvModel",
    "ToyDiscreteModel",
    "REGISTRY",
    "build_agri",
    "build_biased_normal",
    "build_hpv",
]
