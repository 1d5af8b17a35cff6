import os
import yaml

OUTPUT_ROOT_ENV = "DPDM_OUTPUT_ROOT"


class ConfigReader:
    """
    Utility class for reading the framework settings file (configs/config.yaml).
    Experiment configs are handled by runners.run_manager.ExperimentManager.
    """
    def __init__(self, config_path=None):
        """
        Initialize ConfigReader with the path to the settings YAML file.
        Args:
            config_path (str, optional): Path to the settings YAML file. Defaults to 'configs/config.yaml'.
        """
        if config_path is None:
            config_path = os.path.join(project_root(), 'configs', 'config.yaml')
        self.config_path = config_path
        self.config = self._load_config()

    def _load_config(self):
        """
        Load the YAML settings file.
        Returns:
            dict: The loaded settings, empty when the file is empty.
        Raises:
            FileNotFoundError, yaml.YAMLError
        """
        if not os.path.exists(self.config_path):
            raise FileNotFoundError(f"Settings file not found: {self.config_path}")
        with open(self.config_path, 'r', encoding='utf-8') as file:
            data = yaml.safe_load(file)
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise yaml.YAMLError(f"Invalid YAML structure in {self.config_path}")
        return data

    def get(self, *keys, default=None):
        """
        Retrieve a value from the settings using a sequence of keys.
        Args:
            *keys: Sequence of keys to traverse the settings dict.
            default: Value to return if the key path is not found.
        Returns:
            The value from the settings, or default if not found.
        """
        data = self.config
        for key in keys:
            if isinstance(data, dict) and key in data:
                data = data[key]
            else:
                return default
        return data

    def output_root(self):
        """
        Directory under which run directories are created.
        The DPDM_OUTPUT_ROOT environment variable takes precedence over outputs.root.
        Returns:
            str: Absolute path of the output root.
        """
        root = os.environ.get(OUTPUT_ROOT_ENV) or self.get('outputs', 'root', default='runs') or 'runs'
        if not os.path.isabs(root):
            root = os.path.join(os.getcwd(), root)
        return root


def project_root():
    """Absolute path of the repository root (the directory holding configs/)."""
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
