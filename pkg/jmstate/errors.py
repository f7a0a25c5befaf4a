# Система обработки ошибок
import traceback
from datetime import datetime, timezone

from jmstate import logger

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class JMStateError(Exception):
    """Базовая ошибка пакета"""
    exit_code = EXIT_NUMERICAL
    title = "Numerical failure"

    def __init__(self, message, details=None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ValidationError(JMStateError, ValueError):
    """Некорректные входные данные"""
    exit_code = EXIT_VALIDATION
    title = "Validation error"


class ConfigError(JMStateError, ValueError):
    """Некорректная конфигурация"""
    exit_code = EXIT_VALIDATION
    title = "Configuration error"


class NumericalError(JMStateError, ArithmeticError):
    """Численная ошибка"""
    exit_code = EXIT_NUMERICAL
    title = "Numerical failure"


class RootBracketError(NumericalError):
    """Нет смены знака на отрезке"""


def handle_error(error):
    """Универсальный обработчик ошибок: логирует и возвращает код выхода"""
    if isinstance(error, JMStateError):
        log_error(error.exit_code, error.title, error.message, error)
        return error.exit_code

    # Непредвиденная ошибка
    logger.error(f"Unhandled exception: {error}")
    logger.error(traceback.format_exc())
    log_error(EXIT_NUMERICAL, "Unexpected error", str(error), error)
    return EXIT_NUMERICAL


def log_error(exit_code, title, message, error=None):
    """Логирование ошибок"""
    error_info = {
        'exit_code': exit_code,
        'title': title,
        'message': message,
    }

    if error is not None:
        error_info['error_type'] = type(error).__name__
        details = getattr(error, 'details', None)
        if details:
            error_info['details'] = details

    if exit_code >= EXIT_NUMERICAL:
        logger.error(f"Run Error: {error_info}")
    elif exit_code >= EXIT_VALIDATION:
        logger.warning(f"Input Error: {error_info}")
    else:
        logger.info(f"Info: {error_info}")


def create_error_response(exit_code, message, details=None):
    """Создание стандартизированного документа с ошибкой"""
    response = {
        'error': True,
        'exit_code': exit_code,
        'message': message,
        'timestamp': datetime.now(timezone.utc).isoformat()
    }

    if details:
        response['details'] = details

    return response
