"""Action-unit index constants shared across modules.

AU_IDS fixes the label column order used by label vectors, metrics tables
and the dataset manifest. MINORITY_AU_IDS are the rarely occurring AUs
whose sampling rate gets boosted during training.
"""

AU_IDS = (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24)

MINORITY_AU_IDS = (1, 2, 4, 15, 23, 24)

AU_INDEX = {au: i for i, au in enumerate(AU_IDS)}

NUM_AUS = len(AU_IDS)
