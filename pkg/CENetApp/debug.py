import logging

logger = logging.getLogger("CENetApp")


# Debug logging function
def debug_log(message, data=None):
    if not logger.isEnabledFor(logging.DEBUG):
        return
    if data is not None:
        logger.debug(f"🔍 {message} - Data: {data}")
    else:
        logger.debug(f"🔍 {message}")
