"""Phase reference rotors and the per-phase rotation used across the engine.

Feeder-head voltages are {1∠0°, 1∠-120°, 1∠120°} for phases a, b, c. The
engine can work in a "rotated" frame where every phase quantity is multiplied
by the conjugate of its reference rotor, so the nominal phasor of every phase
maps to 1+0j and the voltage band becomes a near-axis box. Neutral and ground
quantities are never rotated.
"""

import numpy as np

PHASES = ("a", "b", "c")
CONDUCTORS = ("a", "b", "c", "n", "g")

# reference rotors at the feeder head, per phase
REF = {
    "a": 1.0 + 0.0j,
    "b": np.exp(-2j * np.pi / 3.0),
    "c": np.exp(+2j * np.pi / 3.0),
    "n": 1.0 + 0.0j,
    "g": 1.0 + 0.0j,
}


def ref_rotor(phase):
    """Reference rotor of a conductor (1+0j for n and g)."""
    return REF[phase]


def rotate(u, phase):
    """Map a complex phasor into the rotated frame of its phase.

    Multiplies by the conjugate reference rotor so the nominal phasor of
    `phase` maps to 1+0j. Unit-modulus rotor, hence an isometry.
    """
    if phase not in PHASES:
        raise ValueError(f"rotation is defined for phases a/b/c, got {phase!r}")
    return u * np.conj(REF[phase])


def counter_rotate(u, phase):
    """Inverse of :func:`rotate`: recover the true-frame phasor."""
    if phase not in PHASES:
        raise ValueError(f"rotation is defined for phases a/b/c, got {phase!r}")
    return u * REF[phase]


def rotor_array(rotated):
    """Per-conductor storage rotors as a dict {conductor: complex}.

    In the rotated frame a stored value x~ relates to the true phasor by
    x = x~ * rotor[f]; with ``rotated=False`` every rotor is 1 and storage is
    the true frame.
    """
    if rotated:
        return {f: REF[f] if f in PHASES else 1.0 + 0.0j for f in CONDUCTORS}
    return {f: 1.0 + 0.0j for f in CONDUCTORS}
