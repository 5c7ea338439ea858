import datetime
import random
import numpy as np


def now():
    return datetime.datetime.now().strftime("%Y-%m-%d_%H:%M:%S.%f")


def set_seeds(seed: int) -> None:
    """
    set global random seeds; library code draws from explicit
    numpy Generators derived from the same seed
    :param seed: int
    :return: None
    """
    random.seed(seed)
    np.random.seed(seed)


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for the stream identified by ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
