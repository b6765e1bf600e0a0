import os

from dotenv import load_dotenv

load_dotenv()


class Settings:
    # read all variables from .env file
    LOG_LEVEL = os.getenv("PASSBY_LOG_LEVEL", "INFO")
    OUTPUT_DIR = os.getenv("PASSBY_OUTPUT_DIR", "results")
    MASTER_SEED = int(os.getenv("PASSBY_MASTER_SEED", "20220216"))

    # const variables
    MODEL_FORMAT_VERSION = 1  # Version stamped into every model/report file
    CONFIG_SCHEMA_VERSION = 1  # Version of the JSON experiment config schema
    SPEED_OF_SOUND_M_S = 343.0
    KMH_TO_MS = 1000.0 / 3600.0


settings = Settings()
