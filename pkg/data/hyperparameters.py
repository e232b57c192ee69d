import pandas as pd

from utils.errors import ConfigError


def get_hyperparameter_table():
    """
    Return a DataFrame of the tuned adaptation settings per benchmark dataset
    """
    data = {
        "Dataset": ["cora", "pubmed", "citeseer", "wikics", "arxiv"],
        # Rank of the intervention subspace
        "Rank": [8, 32, 32, 4, 2],
        "Layers": [(1,), (1, 2), (2, 3), (2,), (1,)],
        "Learning Rate": [0.01, 0.01, 0.0003, 0.008, 0.006],
        "Entropy Weight": [0.1, 0.1, 0.1, 0.1, 0.1],
        "Gate Sharpness": [10.0, 10.0, 10.0, 10.0, 10.0],
        "Mask Rate": [0.7, 0.2, 0.5, 0.3, 0.2],
        "Base Mask Rate": [0.5, 0.5, 0.5, 0.5, 0.5],
    }
    return pd.DataFrame(data)


def get_search_space():
    """
    Ranges each setting was tuned over; fixed settings map to None
    """
    return {
        "Rank": [2, 4, 8, 16, 32],
        "Learning Rate": (1e-4, 1e-2),
        "Mask Rate": (0.0, 0.8),
        "Entropy Weight": None,
        "Gate Sharpness": None,
        "Base Mask Rate": None,
    }


def preset_overrides(dataset):
    """
    Config overrides for one dataset row

    Parameters:
    - dataset: 'cora', 'pubmed', 'citeseer', 'wikics' or 'arxiv'

    Returns:
    - dict of ``section.field`` keys; backbone depth is raised so every
      intervened layer is a hidden layer
    """
    df = get_hyperparameter_table()
    rows = df[df["Dataset"] == dataset.lower()]
    if rows.empty:
        raise ConfigError(f"unknown preset {dataset!r}; choose from {', '.join(df['Dataset'])}")
    row = rows.iloc[0]
    layers = list(row["Layers"])
    return {
        "intervention.rank": int(row["Rank"]),
        "intervention.layers": layers,
        "ssl.lr": float(row["Learning Rate"]),
        "ssl.lambda_e": float(row["Entropy Weight"]),
        "selection.alpha_gate": float(row["Gate Sharpness"]),
        "masking.rho": float(row["Mask Rate"]),
        "masking.beta": float(row["Base Mask Rate"]),
        "backbone.depth": max(2, max(layers) + 1),
    }


SEARCH_SPACE_KEYS = {
    "intervention.rank": "Rank",
    "ssl.lr": "Learning Rate",
    "masking.rho": "Mask Rate",
    "ssl.lambda_e": "Entropy Weight",
    "selection.alpha_gate": "Gate Sharpness",
    "masking.beta": "Base Mask Rate",
}


def outside_search_space(key, values):
    """
    Values of config ``key`` that fall outside the tuned search space

    Returns:
    - (column name, list of offending values); (None, []) for keys that
      were never tuned. A fixed setting marks every value as offending.
    """
    column = SEARCH_SPACE_KEYS.get(key)
    if column is None:
        return None, []
    space = get_search_space()[column]
    if space is None:
        return column, list(values)
    if isinstance(space, list):
        return column, [v for v in values if v not in space]
    low, high = space
    return column, [v for v in values if not low <= v <= high]
