"""
Disk images: interpolation and complexity ordering
==================================================

A short run on a mixture of 1- to 4-disk images.  Samples with fewer disks
compress at smaller widths.  We look at per-population curves and walk
between two images in latent space.  The network is far from converged after
a few epochs, so expect blurry frames.
"""

from iob import analysis, datasets, training
from iob.bottleneck import IobConfig

bundle = datasets.build_heterogeneous(
    datasets.NDiskConfig(n_disks="heterogeneous", n_samples=2000, seed=0))
print("images", bundle.train.shape, "disk counts", bundle.val_meta("n")[:10])
datasets.export_pgm("disk_sample.pgm", bundle.val[0])

model, manifest = training.train_iob(
    training.ndisk_spec(16), IobConfig.linear(16), bundle,
    training.TrainConfig(lr=1e-3, max_epochs=5))
print(f"{len(manifest.val_losses)} epochs, final composite val loss {manifest.val_losses[-1]:.4g}")

# median normalized error per disk count; simpler images should sit lower
report = analysis.heterogeneous_report(model, bundle, ks=[0, 3, 6, 9, 12, 16], out_dir="disk_explore")
for n in sorted(report.group_sizes):
    med = report.median_curve(n)
    print(f"n={n} ({report.group_sizes[n]} samples): " + "  ".join(f"k={k} {v:.3f}" for k, v in med.items()))

# eight frames between two validation images, endpoints marked underneath
strip = analysis.interpolate_latents(model, bundle.val, analysis.InterpolationSpec(0, 1, steps=8),
                                     path="disk_interp.pgm")
print("interpolation frames", strip.images.shape)
