import os

from dotenv import load_dotenv

basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, '.env'))


class Config:
    DATABASE_URL = os.environ.get('DATABASE_URL') or 'sqlite:///' + os.path.join(basedir, 'runs.db')
    OUTPUT_DIR = os.environ.get('CMCDISK_OUTPUT_DIR') or os.path.join(basedir, 'runs')
    LOG_DIR = os.environ.get('CMCDISK_LOG_DIR') or os.path.join(basedir, 'logs')
    LOG_LEVEL = os.environ.get('CMCDISK_LOG_LEVEL') or 'INFO'
    MAX_REFINEMENT_LEVEL = int(os.environ.get('CMCDISK_MAX_LEVEL') or 8)
    DEBUG = os.environ.get('CMCDISK_DEBUG') is not None
    MAIL_SERVER = os.environ.get('MAIL_SERVER')
    MAIL_PORT = int(os.environ.get('MAIL_PORT') or 25)
    MAIL_USE_TLS = os.environ.get('MAIL_USE_TLS') is not None
    MAIL_USERNAME = os.environ.get('MAIL_USERNAME')
    MAIL_PASSWORD = os.environ.get('MAIL_PASSWORD')
    ADMINS = [a for a in (os.environ.get('ADMINS') or '').split(',') if a]
