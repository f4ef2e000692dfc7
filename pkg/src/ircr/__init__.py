"""Instance-aware robust consistency regularization (IRCR) for semi-supervised
nuclei instance segmentation, exercised on synthetic scenes.

The package is organised as a plain numpy library:

- ``raster``    elementary grid ops (Sobel, dilation, components, centroids)
- ``tensorio``  the IRCR-T binary tensor container
- ``wbis``      watershed-based instance segmentation of NP/HV maps
- ``matching``  centroid-distance bipartite matching of instance sets
- ``priors``    morphological feature KDE priors and the PIAC weight mask
- ``losses``    supervised and consistency objectives with analytic gradients
- ``model``     tiny two-head encoder-decoder, Adam, EMA teacher update
- ``data``      synthetic scene generation, augmentation, dataset files
- ``metrics``   AJI / Dice / object-level F1
- ``trainer``   the mean-teacher training loop and evaluation
- ``cli``       command-line pipeline (gen-data, fit-priors, train, ...)

Array conventions: images and maps are float64 ``numpy`` arrays, channel-first
for multi-channel maps (``(C, H, W)``); instance label maps are int32 ``(H, W)``
arrays with 0 = background; binary masks are bool ``(H, W)`` arrays.
"""

__version__ = "0.1.0"
