"""Bundled example data."""
from importlib import resources

DIARRHEA_SYNTHETIC = "diarrhea_synthetic.csv"


def diarrhea_synthetic_path():
    """Path of the synthetic three-visit panel laid out like the diarrhea survey.

    The file is fabricated (see scripts/make_diarrhea_panel.py); it carries
    the survey's column roles, not its values. Read it with
    ``read_panel_csv(path, PanelSchema(zero_start=False, max_increment=None))``.
    """
    return resources.files(__name__).joinpath(DIARRHEA_SYNTHETIC)
