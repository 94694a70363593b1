"""
Counting dimensions with nested likelihood-ratio tests
======================================================

A rank-d linear map of Gaussian latents, plus a little noise, has intrinsic
dimension d.  After training an ordered autoencoder we open the bottleneck one
unit at a time and ask whether the gain in test log-likelihood is significant.
"""

from iob import baselines, datasets, intrinsic, training
from iob.bottleneck import IobConfig

for d in (1, 2, 3):
    bundle = datasets.sample_linear_gaussian(
        datasets.LinearGaussianConfig(rank=d, dim=16, n_samples=10000, seed=d))

    # a single linear map each way matches how the data were made
    model, _ = training.train_iob(
        training.linear_spec(16, k_max=6), IobConfig.linear(6), bundle,
        training.TrainConfig(lr=1e-3, max_epochs=3000))

    report = intrinsic.estimate_id(model, bundle, alpha=0.05, full=True)
    print(f"rank {d}: {report.summary()}")
    print(report.to_csv())

    # the classical estimator, for comparison
    print("TwoNN:", round(baselines.twonn_estimate(bundle.train), 2))
