"""
Logging setup shared by the CLI and the test suite.
"""
import logging
import os

from utils.config_reader import ConfigReader, project_root

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(config=None, log_file=None, level=None):
    """
    Install a file handler and a stream handler on the root logger.
    Args:
        config (ConfigReader, optional): Settings; read from configs/config.yaml when omitted.
        log_file (str, optional): Overrides logging.log_file from the settings.
        level (str, optional): Overrides logging.level from the settings.
    Returns:
        str: Path of the log file in use.
    """
    config = config or ConfigReader()
    log_file = log_file or config.get('logging', 'log_file', default='logs/app_logs/dpdm.log')
    if not os.path.isabs(log_file):
        log_file = os.path.join(project_root(), log_file)
    os.makedirs(os.path.dirname(log_file), exist_ok=True)
    level_name = (level or config.get('logging', 'level', default='INFO')).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_file, mode='a', encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True
    )
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    return log_file
