from .config import (OrganSpec, PhantomConfig, StationRule, config_from_dict,
                     default_phantom_config)
from .generate import (CaseRecord, cohort_seeds, generate_case, lns_from_organs,
                       margin_infer_baseline, perturb_rules, station_voxel_counts)
from .store import load_case, save_case

__all__ = [
    "OrganSpec", "PhantomConfig", "StationRule", "config_from_dict",
    "default_phantom_config", "CaseRecord", "cohort_seeds", "generate_case",
    "lns_from_organs", "margin_infer_baseline", "perturb_rules",
    "station_voxel_counts", "load_case", "save_case",
]
