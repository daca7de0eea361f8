"""Access to the bundled reference feeder documents."""

from importlib import resources


def data_path(name):
    """Filesystem path of a bundled data file."""
    return str(resources.files("lvopf.data").joinpath(name))


def default_network_path():
    return data_path("cigre_lv_network.json")


def default_devices_path():
    return data_path("cigre_devices.json")


def default_profiles_path():
    return data_path("profiles.csv")
