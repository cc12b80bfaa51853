"""
Package: avatar
Articulated signed-distance-field avatars: root finding, rendering and training

This module sets up the package logger shared by every submodule
"""
import logging
import config

logger = logging.getLogger("avatar")
logger.propagate = False
logger.setLevel(config.LOGGING_LEVEL)

# Make all log formats consistent
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter(
        "[%(asctime)s] [%(levelname)s] [%(module)s] %(message)s",
        "%Y-%m-%d %H:%M:%S %z"
    )
    handler.setFormatter(formatter)
    logger.addHandler(handler)

logger.debug(70 * "*")
logger.debug("  A R T I C U L A T E D   "
             "S D F   A V A T A R S  ".center(70, "*"))
logger.debug(70 * "*")
