"""Single versioned table of workflow defaults.

The CLI, the attack and the evaluation harness read their defaults from here,
so a protocol run is one flag away and ``--help`` shows the same numbers.
"""
DEFAULTS_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
MNIST_MEAN = (0.1307,)

ATTACK = {
    "epsilon": 10 / 255,
    "epochs": 100,
    "learning_rate": 0.01,
    "betas": (0.9, 0.999),
    "adam_eps": 1e-8,
    "lr_decay": 0.5,
    "lr_step": None,  # None -> max(1, epochs // 5)
    "init_data": "range",
    "range_jitter": 0.2,
    "gaussian": (0.45, 0.1),
    "uniform": (0.40, 0.60),
    "prior_batch": 8,
    "xi_init": "zeros",
    "xi_amplitude": 1e-3,
    "layer_fraction": 1.0,
    "seed": 0,
    "resample_prior_each_epoch": False,
}

SPECTRUM = {"tol": 1e-6, "max_iters": 500, "probes": 1000}

TRAIN = {"epochs": 8, "batch_size": 32, "learning_rate": 0.002, "optimizer": "adam", "seed": 0}

EVAL = {"noise_seeds": 5, "example_count": 4}

OUTPUT_ENV = "INTRIUAP_OUT"
DEFAULT_OUT = "intriuap-out"
