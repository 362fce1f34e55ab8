import logging
import os

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def log_path(name):
    """Per-module log file under NLRE_LOG_DIR (default logs/)."""
    return os.path.join(os.environ.get('NLRE_LOG_DIR', 'logs'), f'{name}.log')


def setup_logger(name, log_file, level=None):
    if level is None:
        level = os.environ.get('NLRE_LOG_LEVEL', 'INFO').upper()
    os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)
    logger = logging.getLogger(name)
    logger.setLevel(level)
    # nothing propagates to the root logger: stdout is reserved for CLI results
    logger.propagate = False
    if not logger.handlers:
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    return logger
