import numpy as np
import pytest

import advdiffusion as adv


@pytest.fixture(scope="session")
def dataset16():
    return adv.gen_toy_dataset(16, 3)


@pytest.fixture(scope="session")
def ensemble():
    return adv.build_ensemble()


@pytest.fixture(scope="session")
def sched50():
    return adv.make_linear_schedule(50)


@pytest.fixture(scope="session")
def oracle(dataset16):
    return adv.fit_oracle(dataset16.images)


@pytest.fixture(scope="session")
def classifier(dataset16):
    return adv.train_classifier(dataset16.images, dataset16.labels,
                                steps=30, seed=3)


@pytest.fixture(scope="session")
def prototypes(ensemble, dataset16):
    return adv.build_prototypes(ensemble.victim, dataset16.images,
                                dataset16.labels, adv.N_CLASSES)


@pytest.fixture(scope="session")
def objective_of(ensemble):
    """Equal-weight ensemble similarity of a plain image array."""
    from advdiffusion import tensor as T

    def compute(x, x_tar):
        w = np.ones(ensemble.n_members)
        obj, _ = adv.ensemble_objective(ensemble, w, T.Tensor(x), x_tar=x_tar)
        return obj.item()

    return compute
