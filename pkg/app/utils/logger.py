import os
import sys

from loguru import logger

from app.config.settings import BaseConfig

# Project root for relative paths (app/utils/logger.py -> project root)
PROJECT_ROOT = os.path.dirname(
    os.path.dirname(os.path.dirname(__file__))
)

# Remove default sink and add configured ones
logger.remove()
logger.configure(extra={"service": BaseConfig.SERVICE_NAME, "env": BaseConfig.ENV})

if not BaseConfig.DISABLE_LOG:
    logger.add(
        sys.stderr,
        level=BaseConfig.LOG_LEVEL,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
    )

    # File logger, named after the service
    log_file_path = os.path.join(PROJECT_ROOT, "logs", f"{BaseConfig.SERVICE_NAME}.log")
    logger.add(
        log_file_path,
        level="DEBUG" if BaseConfig.DEBUG else BaseConfig.LOG_LEVEL,
        format="{time:YYYY-MM-DD HH:mm:ss} | {extra[service]} | {extra[env]} | {level: <8} | {name}:{function}:{line} - {message}",
        rotation="10 MB",
    )

# Export
__all__ = ["logger"]
