"""Higher-order moment matching for unsupervised domain adaptation."""

__version__ = "0.1.0"

from homm.discrepancy import (  # noqa: E402
    ClassCenters,
    KernelConfig,
    PseudoLabelAssignment,
    clustering_loss,
    coral_loss,
    entropy_loss,
    gram_loss,
    homm_full,
    homm_group,
    homm_sampled,
    kernel_mmd,
    khomm,
    linear_mmd,
    update_centers,
)
from homm.estimator import HoMMClassifier  # noqa: E402
from homm.moments import (  # noqa: E402
    CapacityError,
    mean_tensor_power,
    partition_groups,
    sample_indices,
    sampled_products,
    tensor_power,
)

__all__ = [
    "CapacityError", "ClassCenters", "HoMMClassifier", "KernelConfig", "PseudoLabelAssignment",
    "clustering_loss", "coral_loss", "entropy_loss", "gram_loss", "homm_full", "homm_group",
    "homm_sampled", "kernel_mmd", "khomm", "linear_mmd", "mean_tensor_power", "partition_groups",
    "sample_indices", "sampled_products", "tensor_power", "update_centers",
]
