"""Search for PID gain triples passing the spectral stability screen.

The screen in spacearm.control.validate_gains needs a spread proportional
spectrum: with uniform gains on all channels both margins fail. This
script sweeps diagonal candidates, keeps those passing both margins, and
additionally filters for discrete-loop sanity at the plant substep rate
(every channel gain times dt well below the unit-circle bound, derivative
channel below 1 because it feeds back the previous command).

Run: python3 scripts/find_stable_gains.py
"""

import itertools

import numpy as np

from spacearm.control import ControllerGains, validate_gains

DT = 0.01
P_SOFT = [0.5, 1.0, 2.0, 4.0]
P_STIFF = [6.0, 8.0, 12.0, 16.0]
D_VALUES = [0.01, 0.02, 0.05, 0.1, 0.2]
I_VALUES = [0.1, 0.25, 0.5, 1.0]


def main():
    rows = []
    for p_soft, p_stiff, d, i in itertools.product(
        P_SOFT, P_STIFF, D_VALUES, I_VALUES
    ):
        gains = ControllerGains.from_diagonals(
            [p_soft] * 5 + [p_stiff], [d] * 6, [i] * 6
        )
        report = validate_gains(gains)
        if not report.stable:
            continue
        if d >= 1.0 or p_stiff * DT > 0.5 or i * DT > 0.5:
            continue
        slack = min(
            report.coupling_left - report.coupling_right,
            report.damping_left - report.damping_right,
        )
        rows.append((slack, p_soft, p_stiff, d, i, report))
    rows.sort(reverse=True)
    print(f"{len(rows)} stable candidates (best slack first)")
    for slack, p_soft, p_stiff, d, i, report in rows[:15]:
        print(
            f"  P=({p_soft}, {p_stiff})  D={d}  I={i}"
            f"  coupling {report.coupling_left:.3g} > {report.coupling_right:.3g}"
            f"  damping {report.damping_left:.3g} > {report.damping_right:.3g}"
            f"  slack {slack:.3g}"
        )
    uniform = validate_gains(
        ControllerGains.from_diagonals([1.0] * 6, [1.0] * 6, [1.0] * 6)
    )
    print(
        "uniform gains fail both margins:",
        uniform.coupling_left,
        "<=",
        uniform.coupling_right,
        "and",
        uniform.damping_left,
        "<=",
        uniform.damping_right,
    )


if __name__ == "__main__":
    main()
