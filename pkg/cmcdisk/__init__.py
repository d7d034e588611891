import logging
import os
from logging.handlers import RotatingFileHandler, SMTPHandler

import sqlalchemy as sa
import sqlalchemy.orm as so

from config import Config

logger = logging.getLogger('cmcdisk')

# The ledger engine is created lazily by SQLAlchemy: no connection is opened
# until the first session actually talks to the database.
engine = sa.create_engine(Config.DATABASE_URL)
Session = so.sessionmaker(engine, expire_on_commit=False)


def configure_logging(config=Config):
    """Attach file and mail handlers to the package logger.

    Only active outside debug mode, the same way a deployed service would
    only mail and rotate logs in production.
    """
    logger.setLevel(config.LOG_LEVEL)
    if logger.handlers:
        return
    if config.DEBUG:
        logger.addHandler(logging.StreamHandler())
        return

    # --- Sending Errors by Email ---
    # A long batch run that dies at 3am should tell somebody. ERROR records
    # (failed solves, config errors) are mailed to the admins.
    if config.MAIL_SERVER and config.ADMINS:
        auth = None
        if config.MAIL_USERNAME or config.MAIL_PASSWORD:
            auth = (config.MAIL_USERNAME, config.MAIL_PASSWORD)
        secure = None
        if config.MAIL_USE_TLS:
            secure = ()
        mail_handler = SMTPHandler(
            mailhost=(config.MAIL_SERVER, config.MAIL_PORT),
            fromaddr='no-reply@' + config.MAIL_SERVER,
            toaddrs=config.ADMINS,
            subject='cmcdisk run failure',
            credentials=auth,
            secure=secure,
        )
        mail_handler.setLevel(logging.ERROR)
        logger.addHandler(mail_handler)

    # --- Logging to a File ---
    # 10 KiB per file, ten backups kept (cmcdisk.log.1, cmcdisk.log.2, ...).
    if not os.path.exists(config.LOG_DIR):
        os.makedirs(config.LOG_DIR)
    file_handler = RotatingFileHandler(os.path.join(config.LOG_DIR, 'cmcdisk.log'),
                                       maxBytes=10240, backupCount=10)
    file_handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s: %(message)s'))
    file_handler.setLevel(logging.INFO)
    logger.addHandler(file_handler)
    logger.info('cmcdisk startup')
