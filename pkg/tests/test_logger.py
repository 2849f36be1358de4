import logging

import pytest

from clotseg.core.logger import PACKAGE_LOGGER, TqdmHandler, configure_logging, get_logger, set_level


@pytest.fixture
def package_logger():
    logger = logging.getLogger(PACKAGE_LOGGER)
    levels = (logger.level, [handler.level for handler in logger.handlers])
    yield logger
    logger.setLevel(levels[0])
    for handler, level in zip(logger.handlers, levels[1]):
        handler.setLevel(level)


def test_package_logger_routes_through_tqdm():
    logger = get_logger("clotseg.services.trainer")
    assert logger.name.startswith(PACKAGE_LOGGER)
    assert any(isinstance(handler, TqdmHandler) for handler in logging.getLogger(PACKAGE_LOGGER).handlers)


def test_set_level_accepts_names_and_numbers(package_logger):
    set_level("debug")
    assert package_logger.level == logging.DEBUG
    assert all(handler.level == logging.DEBUG for handler in package_logger.handlers)
    set_level(logging.ERROR)
    assert package_logger.level == logging.ERROR


def test_unknown_level_is_rejected(package_logger):
    with pytest.raises(ValueError, match="Unknown log level"):
        set_level("LOUD")


def test_tqdm_handler_writes_formatted_records(tmp_path):
    path = tmp_path / "log.txt"
    with path.open("w", encoding="utf-8") as stream:
        handler = TqdmHandler(stream)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        handler.emit(logging.LogRecord("clotseg", logging.INFO, __file__, 1, "epoch %d", (3,), None))
    assert path.read_text(encoding="utf-8").strip() == "INFO epoch 3"


def test_missing_config_falls_back_to_basic_config(tmp_path):
    configure_logging(tmp_path / "absent.yaml", force=True)
    try:
        assert get_logger("clotseg.test").getEffectiveLevel() <= logging.WARNING
    finally:
        configure_logging(force=True)
