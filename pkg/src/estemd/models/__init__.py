"""Environmental model catalogue and the case-study installer."""
from estemd.models.ep import EP_MODEL, EpModel, effective_precipitation, mean_of_outputs
from estemd.models.install import (
    AVERAGE_TOPICS,
    InstallReport,
    ModelTemplate,
    check_template,
    install_case_study,
    load_template,
    template_names,
)

__all__ = [
    "AVERAGE_TOPICS",
    "EP_MODEL",
    "EpModel",
    "InstallReport",
    "ModelTemplate",
    "check_template",
    "effective_precipitation",
    "install_case_study",
    "load_template",
    "mean_of_outputs",
    "template_names",
]
