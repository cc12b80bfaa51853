"""
Global Configuration for Application
"""
import os
import logging
from dotenv import load_dotenv

# Pick up a local .env file when one is present
load_dotenv()

# Get configuration from environment
AVATAR_CONFIG = os.getenv("AVATAR_CONFIG", "configs/default.json")
AVATAR_SEED = int(os.getenv("AVATAR_SEED", "0"))
AVATAR_THREADS = int(os.getenv("AVATAR_THREADS", "1"))

# Deterministic mode runs every command on a single thread
AVATAR_DETERMINISTIC = os.getenv("AVATAR_DETERMINISTIC", "false").lower() == "true"

LOGGING_LEVEL = getattr(logging, os.getenv("LOGGING_LEVEL", "INFO").upper(), logging.INFO)
