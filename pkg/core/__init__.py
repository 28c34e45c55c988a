from .settings import AppConfig, ConsoleLog, silent_log

__all__ = ['AppConfig', 'ConsoleLog', 'silent_log']
