import os
import logging
from logging.handlers import RotatingFileHandler

__version__ = "0.3.0"

logger = logging.getLogger("jmstate")


def create_logger(testing=False):
    """Настройка логгера приложения"""
    log_dir = os.getenv('JMSTATE_LOG_DIR', 'logs')
    level = getattr(logging, os.getenv('JMSTATE_LOG_LEVEL', 'INFO').upper(), logging.INFO)

    if not testing and not any(isinstance(h, RotatingFileHandler) for h in logger.handlers):
        if not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(os.path.join(log_dir, 'jmstate.log'),
                                           maxBytes=10240, backupCount=10)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
        ))
        file_handler.setLevel(level)
        logger.addHandler(file_handler)
        logger.setLevel(level)
        logger.info('jmstate %s started', __version__)

    return logger


def log_action(action, details=""):
    """Логирование шагов конвейера"""
    logger.info(f"ACTION: {action} | {details}")
