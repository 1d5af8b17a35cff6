import glob
import logging
import os

import allure
import pytest

from diffusion import denoiser as dn
from diffusion.dm_configs import create_dm_config
from oracle.gmm_oracle import GmmSpec
from utils.config_reader import ConfigReader, project_root
from utils.log_util import configure_logging


def pytest_configure(config):
    log_file = os.path.join(project_root(), 'logs', 'app_logs', 'test_run.log')
    config._dpdm_log_file = configure_logging(log_file=log_file)


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == 'call' and rep.failed:
        settings = ConfigReader()
        if not settings.get('allure', 'attach_artifacts', default=True):
            return
        log_file = getattr(item.config, '_dpdm_log_file', None)
        if log_file and os.path.exists(log_file):
            with open(log_file, 'rb') as f:
                allure.attach(f.read(), name='test_run.log', attachment_type=allure.attachment_type.TEXT)
        tmp_path = item.funcargs.get('tmp_path', None)
        if tmp_path:
            for csv_path in sorted(glob.glob(os.path.join(str(tmp_path), '**', '*.csv'), recursive=True)):
                allure.attach.file(csv_path, name=os.path.basename(csv_path),
                                   attachment_type=allure.attachment_type.CSV)
                logging.getLogger('pytest').info(f"CSV attached to Allure: {csv_path}")


@pytest.fixture(scope='session')
def gmm():
    return GmmSpec.default()


@pytest.fixture(scope='session')
def edm():
    return create_dm_config('edm')


@pytest.fixture(scope='session')
def tiny_arch():
    return dn.ArchitectureSpec(depth=1, hidden_width=8, embedding_dim=3, fourier_frequencies=2, num_classes=9)


@pytest.fixture
def tiny_params(tiny_arch):
    return dn.init_params(tiny_arch, seed=3, zero_head=False)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / 'runs'
    monkeypatch.setenv('DPDM_OUTPUT_ROOT', str(root))
    return root
