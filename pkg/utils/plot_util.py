import logging
import os

import numpy as np

from utils.config_reader import ConfigReader


class PlotUtil:
    """
    Optional SVG output: sample scatter plots and the log-log variance plot.
    Failures are logged, never raised, so a plotting problem cannot fail a run.
    """
    @staticmethod
    def _pyplot():
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
        return plt

    @staticmethod
    def save_scatter(points, path, means=None, title=None):
        """
        Scatter plot of 2D samples (subsampled to plots.max_points) with optional mode markers.
        Args:
            points (numpy.ndarray): (n, 2) samples.
            path (str): Output .svg path.
            means (numpy.ndarray, optional): (K, 2) mode locations.
            title (str, optional): Figure title.
        Returns:
            str or None: The path written, None on failure.
        """
        logger = logging.getLogger("PlotUtil")
        try:
            config = ConfigReader()
            max_points = int(config.get('plots', 'max_points', default=20000) or 20000)
            size = float(config.get('plots', 'point_size', default=0.5) or 0.5)
            pts = np.asarray(points)[:max_points]
            plt = PlotUtil._pyplot()
            fig, ax = plt.subplots(figsize=(5, 5))
            ax.scatter(pts[:, 0], pts[:, 1], s=size, alpha=0.5)
            if means is not None:
                mu = np.asarray(means)
                ax.scatter(mu[:, 0], mu[:, 1], marker='x', color='red', s=20)
            ax.set_aspect('equal')
            if title:
                ax.set_title(title)
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            fig.savefig(path, format='svg', metadata={'Date': None})
            plt.close(fig)
            logger.info(f"Scatter plot saved to {path}")
            return path
        except Exception as e:
            logger.error(f"Failed to save scatter plot: {e}")
            return None

    @staticmethod
    def save_variance_plot(ks, variances, path):
        """Log-log plot of variance against noise multiplicity K with a 1/K reference line."""
        logger = logging.getLogger("PlotUtil")
        try:
            plt = PlotUtil._pyplot()
            ks = np.asarray(ks, dtype=float)
            variances = np.asarray(variances, dtype=float)
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.loglog(ks, variances, 'o-', label='measured')
            ax.loglog(ks, variances[0] * ks[0] / ks, '--', label='1/K')
            ax.set_xlabel('K')
            ax.set_ylabel('variance')
            ax.legend()
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            fig.savefig(path, format='svg', metadata={'Date': None})
            plt.close(fig)
            logger.info(f"Variance plot saved to {path}")
            return path
        except Exception as e:
            logger.error(f"Failed to save variance plot: {e}")
            return None
