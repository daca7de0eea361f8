"""Default 24-hour profile shapes and tabular profile ingestion.

The reference profiles are synthetic but shaped like the usual residential
day: evening-peaked household demand, a midday PV bell, night-time EV
charging. Shapes are normalized to peak 1.0 and scaled by device ratings.
"""

import csv

import numpy as np

# normalized residential demand, hours 0..23, evening peak at 19h
RESIDENTIAL_SHAPE = np.array([
    0.36, 0.32, 0.30, 0.29, 0.30, 0.34, 0.46, 0.58, 0.52, 0.46, 0.44, 0.47,
    0.52, 0.50, 0.46, 0.52, 0.66, 0.86, 1.00, 0.96, 0.86, 0.70, 0.55, 0.43,
])


def pv_shape(hours=24, sunrise=6, sunset=19):
    """Midday-peaked generation bell, zero outside daylight."""
    t = np.arange(hours)
    s = np.zeros(hours)
    day = (t > sunrise) & (t < sunset)
    s[day] = np.sin(np.pi * (t[day] - sunrise) / (sunset - sunrise)) ** 2
    return s


def ev_night_shape(hours=24, start=19, duration=3):
    """Full-rate charging block starting in the evening (wraps past midnight)."""
    s = np.zeros(hours)
    for k in range(duration):
        s[(start + k) % hours] = 1.0
    return s


def battery_shape(hours=24):
    """User-driven pattern: charge at noon, discharge in the evening."""
    charge = np.zeros(hours)
    discharge = np.zeros(hours)
    charge[11:14] = 1.0
    discharge[19:22] = 1.0
    return charge, discharge


def read_profile_table(path):
    """Read a column-per-device tabular text file (CSV, kW values).

    First column is the period label and is ignored beyond ordering; every
    other column becomes {device_id: np.ndarray}.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    names = header[1:]
    data = np.array([[float(v) for v in r[1:]] for r in rows])
    return {name: data[:, k] for k, name in enumerate(names)}


def write_profile_table(path, columns):
    names = sorted(columns)
    T = len(next(iter(columns.values())))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", *names])
        for t in range(T):
            w.writerow([t, *[f"{columns[n][t]:.6g}" for n in names]])
