"""Monte-Carlo helpers shared by the estimator tests and the acceptance suite."""
import numpy as np

from pareto_ood.data import TwoBitSampleSpec, sample_twobit
from pareto_ood.nn import DenseNet
from pareto_ood.objectives import EstimatorConfig, irmv1_penalty
from pareto_ood.twobit import irms_residual

ADD_C = 10.0  # |ga * gb| <= 1.44**2 for the weights used here


def linear_net(w1, w2):
    return DenseNet([2, 1], params=np.array([w1, w2]), bias=False)


def population_penalty(w1, w2, alpha, beta, loss_kind="mse"):
    """Closed-form squared dummy-classifier gradient for one environment."""
    return float(irms_residual((w1 + w2, w1 - w2), alpha, beta, loss_kind)) ** 2


def minibatch_estimates(w1, w2, alpha, beta, n_batches, batch, seed, loss_kind="mse"):
    """Unbiased-split and naive squared estimates on independent minibatches."""
    pool = sample_twobit(TwoBitSampleSpec(alpha, beta, n_batches * batch, seed, 0))
    net = linear_net(w1, w2)
    split_cfg = EstimatorConfig("unbiased_split", "add_constant", ADD_C)
    naive_cfg = EstimatorConfig("population_style_biased")
    split, naive = np.empty(n_batches), np.empty(n_batches)
    for i in range(n_batches):
        b = pool.subset(slice(i * batch, (i + 1) * batch))
        split[i] = irmv1_penalty([b], net, split_cfg, loss_kind) - ADD_C
        naive[i] = irmv1_penalty([b], net, naive_cfg, loss_kind)
    return split, naive
