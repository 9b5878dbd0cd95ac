import os
import copy
import json
import logging

from stream_ssm.modules.errors import ConfigurationError

logger = logging.getLogger(__name__)


def merge_defaults(config, defaults):
    """
    Adds values from defaults that do not exist in config.
    Works recursively for nested dictionaries.
    """
    changed = False

    for key, value in defaults.items():
        if key not in config:
            config[key] = copy.deepcopy(value)
            changed = True
        elif isinstance(value, dict) and isinstance(config[key], dict):
            if merge_defaults(config[key], value):
                changed = True

    return changed


def verify_default_config(path, default_content=None):
    """
    Ensures the JSON file exists and contains every key defined in
    default_content. Missing keys are added with their default value.
    """
    if default_content is None:
        default_content = {}

    os.makedirs(os.path.dirname(path), exist_ok=True)

    config = {}

    if os.path.exists(path):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                config = json.load(f)
        except json.JSONDecodeError:
            logger.warning("Corrupted config file %s, recreating it with defaults.", path)
            config = {}
    else:
        logger.info("Config file %s does not exist, creating it with defaults.", path)

    changed = merge_defaults(config, default_content)

    if not os.path.exists(path) or changed:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(config, f, ensure_ascii=False, indent=4)

    return config


def load_config(config_path, default_content=None):
    """
    Loads a user supplied JSON config and merges the defaults under it.
    The file itself is never rewritten.
    """
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {config_path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{config_path}:{e.lineno}: invalid JSON ({e.msg})")

    if not isinstance(config, dict):
        raise ConfigurationError(f"{config_path}: top level must be an object")

    merge_defaults(config, default_content or {})
    return config


def save_config(path, content):
    """
    Writes the JSON file at the given path, creating intermediate
    directories if needed.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(content, f, ensure_ascii=False, indent=4)


def apply_overrides(config, overrides):
    """
    Sets dotted keys (``"model.n"``) from command-line flags.
    ``None`` values mean the flag was not given and are skipped.
    """
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = config
        *parents, leaf = dotted.split(".")
        for key in parents:
            if not isinstance(node.get(key), dict):
                node[key] = {}
            node = node[key]
        node[leaf] = value
    return config
