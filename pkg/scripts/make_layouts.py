"""Generate the shipped 62- and 32-electrode layout files.

Positions follow an idealized spherical 10/10 construction: midline sites
sit at multiples of 22.5 degrees from the vertex, the outer ring sits on the
equator at 18 degree steps, and lateral sites within a row are spaced
evenly along the great circle between the row's midline site and its
equatorial end point.

    python scripts/make_layouts.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

REGIONS = ("prefrontal", "frontal", "fronto-central", "central",
           "temporal-left", "temporal-right", "parietal", "occipital")

SEED62 = """FP1 FPZ FP2 AF3 AF4 F7 F5 F3 F1 FZ F2 F4 F6 F8 FT7 FC5 FC3 FC1 FCZ FC2 FC4 FC6 FT8
T7 C5 C3 C1 CZ C2 C4 C6 T8 TP7 CP5 CP3 CP1 CPZ CP2 CP4 CP6 TP8 P7 P5 P3 P1 PZ P2 P4 P6 P8
PO7 PO5 PO3 POZ PO4 PO6 PO8 CB1 O1 OZ O2 CB2""".split()

DEAP32 = """FP1 AF3 F3 F7 FC5 FC1 C3 T7 CP5 CP1 P3 P7 PO3 O1 OZ PZ FP2 AF4 FZ F4 F8 FC6 FC2 CZ
C4 T8 CP6 CP2 P4 P8 PO4 O2""".split()

# row prefix -> (signed polar angle of the midline site, equator angle of the row end)
ROWS = {"AF": (67.5, 36.0), "F": (45.0, 54.0), "FC": (22.5, 72.0), "C": (0.0, 90.0),
        "CP": (-22.5, 108.0), "P": (-45.0, 126.0), "PO": (-67.5, 144.0)}
EQUATOR = {"FP": 18.0, "O": 162.0, "FT": 72.0, "T": 90.0, "TP": 108.0}


def equator(angle_deg, side):
    a = np.radians(angle_deg)
    return np.array([side * np.sin(a), np.cos(a), 0.0])


def midline(theta_deg):
    t = np.radians(theta_deg)
    return np.array([0.0, np.sin(t), np.cos(t)])


def slerp(p, q, t):
    omega = np.arccos(np.clip(p @ q, -1.0, 1.0))
    return (np.sin((1 - t) * omega) * p + np.sin(t * omega) * q) / np.sin(omega)


def split(label):
    head = label.rstrip("0123456789Z")
    tail = label[len(head):]
    return head, tail


def position(label):
    if label == "FPZ":
        return midline(90.0)
    if label == "OZ":
        return midline(-90.0)
    if label.startswith("CB"):
        side = -1 if int(label[2:]) % 2 else 1
        a, inc = np.radians(150.0), np.radians(112.5)
        return np.array([side * np.sin(a) * np.sin(inc), np.cos(a) * np.sin(inc), np.cos(inc)])
    head, tail = split(label)
    if tail == "Z":
        return midline(ROWS[head][0])
    num = int(tail)
    side = -1 if num % 2 else 1
    k = (num + 1) // 2  # 1 next to the midline ... 4 on the equator
    if head in EQUATOR:
        return equator(EQUATOR[head], side)
    mid, end = ROWS[head]
    if k == 4:
        return equator(end, side)
    return slerp(midline(mid), equator(end, side), k / 4.0)


def region(label):
    head, _ = split(label)
    if head in ("FP", "AF"):
        return "prefrontal"
    if head == "F":
        return "frontal"
    if head == "FC":
        return "fronto-central"
    if head in ("C", "CP"):
        return "central"
    if head in ("FT", "T", "TP"):
        return "temporal-left" if int(label[len(head):]) % 2 else "temporal-right"
    if head == "P":
        return "parietal"
    return "occipital"


def hemisphere(pos):
    if abs(pos[0]) < 1e-12:
        return "M"
    return "L" if pos[0] < 0 else "R"


def write(path, labels, title):
    lines = [f"# {title}", "# label x y z region hemisphere  (x right, y anterior, z vertex)"]
    for lab in labels:
        p = position(lab)
        p[np.abs(p) < 1e-15] = 0.0
        lines.append(f"{lab} {p[0]:.12f} {p[1]:.12f} {p[2]:.12f} {region(lab)} {hemisphere(p)}")
    Path(path).write_text("\n".join(lines) + "\n")


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write(out / "layout62.txt", SEED62, "62-electrode 10/20 extended layout (SEED family)")
    write(out / "layout32.txt", DEAP32, "32-electrode 10/20 layout (DEAP)")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "src" / "eegsal" / "data")
