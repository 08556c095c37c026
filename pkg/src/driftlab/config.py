"""Read the lab-wide defaults in config.yaml.

These are the constants an experiment starts from (schedule, network,
training, search and metric parameters).  Experiment configs given on the
command line are merged over them; see experiment.py for validation."""

import copy
import logging
import yaml
from .util import safe_path
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
LOGGER = Logger()

# don't rely on the cwd to find the config files
CONFIGPATH = safe_path("../../config.yaml")

class Config:
    def __init__(self, path: str = CONFIGPATH):
        try:
            with open(path, "r", encoding="utf-8") as f:
                self.vars = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.warning("No defaults found at %s, using empty defaults", path)
            self.vars = {}

    def merged(self, overrides: dict) -> dict:
        """Return the defaults with overrides merged in, one level deep per
        section.  Sections absent from the defaults are taken as given."""
        result = copy.deepcopy(self.vars)
        for key, value in (overrides or {}).items():
            if isinstance(value, dict) and isinstance(result.get(key), dict):
                result[key].update(copy.deepcopy(value))
            else:
                result[key] = copy.deepcopy(value)
        return result
