__version__ = "0.1.0"


import logging


logger = logging.getLogger("switch_attention")
logger.setLevel(logging.INFO)
