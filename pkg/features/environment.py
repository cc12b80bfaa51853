"""
Environment for Behave Testing
"""
import os
import shutil
import tempfile
from os import getenv

CONFIG_DIR = getenv('AVATAR_CONFIG_DIR',
                    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                                 'configs'))


def before_all(context):
    """ Executed once before all tests """
    context.config_dir = CONFIG_DIR
    # -- SET LOG LEVEL: behave --logging-level=ERROR ...
    # on behave command-line or in "behave.ini"
    context.config.setup_logging()


def before_scenario(context, scenario):
    """ Every scenario works in its own scratch directory """
    context.workdir = tempfile.mkdtemp(prefix='avatar-')
    context.config_path = os.path.join(context.config_dir, 'sphere.json')


def after_scenario(context, scenario):
    shutil.rmtree(context.workdir, ignore_errors=True)
