"""DemineUQ: MC Dropout uncertainty for image classifiers under clean,
adversarial and noisy inputs."""

__version__ = "0.1.0"
