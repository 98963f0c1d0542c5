#!/usr/bin/env python3
import os
from dotenv import load_dotenv

load_dotenv()


def _env_float(key, default):
    val = os.getenv(key)
    if val is None or val.strip() == "":
        return default
    try:
        # Accept quoted numbers too
        return float(val.strip().strip('"').strip("'"))
    except ValueError:
        return None


def _env_int(key, default):
    val = _env_float(key, default)
    if val is None or not float(val).is_integer():
        return None
    return int(val)


class Config:
    """
    Process-wide defaults, loaded from the environment or a .env file.
    Experiment configs take their unset numerical defaults from here.
    """
    LOG_LEVEL = os.getenv("SPECTRAL_MOE_LOG_LEVEL", "INFO").upper()
    OUTPUT_DIR = os.getenv("SPECTRAL_MOE_OUTPUT_DIR", "runs")

    RHO = _env_float("SPECTRAL_MOE_RHO", 10.0)
    ETA = _env_float("SPECTRAL_MOE_ETA", 1.0)
    BALANCE_COEFFICIENT = _env_float("SPECTRAL_MOE_BALANCE_COEFFICIENT", 1e-3)
    MAX_JOBS = _env_int("SPECTRAL_MOE_MAX_JOBS", 4)

    LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

    @classmethod
    def validate(cls):
        """
        Validates that every configured value parsed and lies in range.
        """
        problems = []
        if cls.LOG_LEVEL not in cls.LOG_LEVELS:
            problems.append(f"SPECTRAL_MOE_LOG_LEVEL={cls.LOG_LEVEL}")
        for key, value in (("SPECTRAL_MOE_RHO", cls.RHO), ("SPECTRAL_MOE_ETA", cls.ETA)):
            if value is None or value <= 0:
                problems.append(key)
        if cls.BALANCE_COEFFICIENT is None or cls.BALANCE_COEFFICIENT < 0:
            problems.append("SPECTRAL_MOE_BALANCE_COEFFICIENT")
        if cls.MAX_JOBS is None or cls.MAX_JOBS < 1:
            problems.append("SPECTRAL_MOE_MAX_JOBS")

        if problems:
            raise ValueError(f"Invalid configuration: {', '.join(problems)}")

        return True

# Validate on import so startup fails fast on a malformed environment.
Config.validate()
