"""
-----------------------------------------------------------------------------------
Description: plot data for the latent scatter, the k-distance curves, the
             per-class cluster assignments & the PSNR vs accuracy sweep.
             Only CSV files are written, rendering is left to the reader.
"""
import logging
import os

import numpy as np
import pandas as pd

from denoise import DetectionResult
from errors import ArgumentError, ArtifactIOError
from evaluation import sweep_frame
from linalg import eigen_top_n, pca_project
from model.model import latent_matrix

KDISTANCE_DIR = 'kdistance'
CLUSTERS_DIR = 'clusters'


def principal_plane(points):
    """2-d PCA coordinates of the rows of `points`."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        return np.zeros((points.shape[0], 2))
    n = min(2, points.shape[0], points.shape[1])
    coords = pca_project(points, eigen_top_n(points, n), n)
    if n < 2:
        coords = np.concatenate([coords, np.zeros((coords.shape[0], 2 - n))], axis=1)
    return coords


class PlotDataExporter:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def _write(self, frame: pd.DataFrame, name):
        path = os.path.join(self.out_dir, name)
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            frame.to_csv(path, index=False)
        except OSError as e:
            raise ArtifactIOError(path, e) from e
        logging.info(f'plot data: {path} ({len(frame)} rows)')
        return path

    def latent_scatter(self, latents, ledger=None, name='latent_scatter.csv'):
        """Every latent point on the first two principal axes, flips marked when a ledger is known."""
        if not latents:
            raise ArgumentError('no latent point to export')
        indices, labels, mus = latent_matrix(latents)
        coords = principal_plane(mus)
        frame = pd.DataFrame({'sample_index': indices, 'label': labels})
        if ledger is not None:
            frame['is_flipped'] = ledger.flipped_mask(indices).astype(int)
        frame['pc1'], frame['pc2'] = coords[:, 0], coords[:, 1]
        return self._write(frame, name)

    def kdistance_curves(self, result: DetectionResult, subdir=KDISTANCE_DIR):
        """One rank,distance file per clustered class, plus pooled.csv for a global epsilon."""
        curves = [(f'class_{label}.csv', d.curve) for label, d in sorted(result.per_class.items())
                  if d.curve is not None]
        if result.pooled_curve is not None:
            curves.append(('pooled.csv', result.pooled_curve))
        return [self._write(pd.DataFrame({'rank': np.arange(curve.size), 'distance': curve}),
                            os.path.join(subdir, name))
                for name, curve in curves]

    def cluster_assignments(self, result: DetectionResult, subdir=CLUSTERS_DIR):
        """One sample_index,cluster,role file per clustered class."""
        return [self._write(pd.DataFrame({'sample_index': d.sample_indices,
                                          'cluster': d.assignment.labels,
                                          'role': d.assignment.roles}),
                            os.path.join(subdir, f'class_{label}.csv'))
                for label, d in sorted(result.per_class.items()) if d.assignment is not None]

    def sweep(self, records, name='sweep.csv'):
        return self._write(sweep_frame(records), name)
