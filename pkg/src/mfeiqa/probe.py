"""Linear probe on frozen encoder embeddings (distortion-type classification)."""
from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .contrastive import DistortionEncoder, embed_images, load_images
from .data import DatasetManifest


def distortion_labels(manifest: DatasetManifest) -> np.ndarray:
    labels = [r.distortion_type for r in manifest.records]
    if any(x is None for x in labels):
        raise ValueError(f"{manifest.name}: the probe needs distortion types on every record")
    return np.array(labels)


def linear_probe(encoder: DistortionEncoder, train: DatasetManifest, test: DatasetManifest, seed: int = 0) -> float:
    """Fit a logistic-regression probe on ``train`` embeddings; return accuracy on ``test``."""
    x_tr = embed_images(encoder, load_images(train)).double().numpy()
    x_te = embed_images(encoder, load_images(test)).double().numpy()
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    clf.fit(x_tr, distortion_labels(train))
    return float(np.mean(clf.predict(x_te) == distortion_labels(test)))
