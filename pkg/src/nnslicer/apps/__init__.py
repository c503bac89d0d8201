from .attacks import fgsm, pgd
from .cart import CartConfig, DecisionTree, cart_fit, cart_predict
from .detector import Detector, detect, load_detector, save_detector, slice_vector, train_detector
from .prune import PruneConfig, fine_tune, prune
from .protect import ProtectionSet, select_protected, simulate_extraction

__all__ = [
    "fgsm",
    "pgd",
    "CartConfig",
    "DecisionTree",
    "cart_fit",
    "cart_predict",
    "Detector",
    "detect",
    "train_detector",
    "slice_vector",
    "save_detector",
    "load_detector",
    "PruneConfig",
    "prune",
    "fine_tune",
    "ProtectionSet",
    "select_protected",
    "simulate_extraction",
]
