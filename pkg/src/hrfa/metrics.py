"""Evaluation metrics and the per-experiment report.

SSIM follows the usual defaults of the original metric (11x11 Gaussian
window with sigma 1.5, K1 = 0.01, K2 = 0.03, "valid" filtering), computed
per channel and averaged. Images are assumed to live in [0, 1].
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# stop reason of an original the victim already gets wrong; never attacked
CLEAN_ERROR = "clean_error"


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x, g):
    # separable valid correlation over the last two axes
    k = len(g)
    rows = sliding_window_view(x, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim_map(x1, x2, data_range=1.0, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"ssim: incompatible shapes {x1.shape} and {x2.shape}")
    if min(x1.shape[-2:]) < window:
        raise ValueError(f"ssim: images smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1, mu2 = _filter(x1, g), _filter(x2, g)
    s11 = _filter(x1 * x1, g) - mu1 * mu1
    s22 = _filter(x2 * x2, g) - mu2 * mu2
    s12 = _filter(x1 * x2, g) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return num / den


def ssim(x1, x2, data_range=1.0):
    """Mean structural similarity of two (C, H, W) images (or (H, W) planes).

    A batch (B, C, H, W) returns one value per member.
    """
    m = ssim_map(x1, x2, data_range)
    x = np.asarray(x1)
    if x.ndim == 4:
        return m.mean(axis=(1, 2, 3))
    return float(m.mean())


def perturbation_stats(x_ori, x_adv):
    """Norms of the perturbation plus an amplified |delta| map rescaled to [0, 1]."""
    x_ori = np.asarray(x_ori, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_ori.shape != x_adv.shape:
        raise ValueError(f"perturbation_stats: incompatible shapes {x_ori.shape} and {x_adv.shape}")
    delta = x_adv - x_ori
    mag = np.abs(delta)
    peak = mag.max()
    amplified = mag / peak if peak > 0 else np.zeros_like(mag)
    return {
        "l2": float(np.sqrt(np.sum(delta * delta))),
        "linf": float(peak),
        "map": amplified,
    }


def evasion_rate(records, defense):
    """N_err / N over records that carry an outcome for ``defense``.

    Each record maps defense name -> outcome through ``record.defended``;
    an outcome's ``wrong`` flag marks an incorrectly predicted processed
    image.
    """
    records = list(records)
    if not records:
        raise ValueError("evasion_rate: no records")
    wrong = 0
    for r in records:
        if defense not in r.defended:
            raise KeyError(f"evasion_rate: record {r.attack}:{r.index} has no outcome for {defense!r}")
        wrong += bool(r.defended[defense].wrong)
    return wrong / len(records)


@dataclass
class DefenseOutcome:
    wrong: bool
    prediction: int | None = None
    distance: float | None = None


@dataclass
class ExampleRecord:
    attack: str
    index: int
    success: bool
    iterations: int
    l_img: float
    l2: float
    linf: float
    ssim: float
    stop_reason: str
    label: int | None = None
    prediction: int | None = None
    distance: float | None = None
    defended: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    task: str
    tau: float | None
    defenses: list
    records: list

    def attacks(self):
        return list(dict.fromkeys(r.attack for r in self.records))

    def successful(self, attack):
        return [r for r in self.records if r.attack == attack and r.success]

    def aggregates(self):
        """Per-attack success rate, mean SSIM and per-defense evasion.

        Evasion is computed over successful adversarial examples only, since
        those are the ones handed to the defenses. Originals the victim
        already got wrong are counted apart and left out of every rate.
        """
        out = {}
        for name in self.attacks():
            every = [r for r in self.records if r.attack == name]
            mine = [r for r in every if r.stop_reason != CLEAN_ERROR]
            ok = [r for r in mine if r.success]
            row = {
                "count": len(mine),
                "clean_errors": len(every) - len(mine),
                "success_rate": len(ok) / len(mine) if mine else float("nan"),
                "mean_ssim": float(np.mean([r.ssim for r in ok])) if ok else float("nan"),
                "mean_l2": float(np.mean([r.l2 for r in ok])) if ok else float("nan"),
            }
            if self.task == "verification":
                row["mean_distance"] = float(np.mean([r.distance for r in ok])) if ok else float("nan")
            for d in self.defenses:
                row[f"evasion[{d}]"] = evasion_rate(ok, d) if ok else float("nan")
                if self.task == "verification":
                    row[f"distance[{d}]"] = (
                        float(np.mean([r.defended[d].distance for r in ok])) if ok else float("nan")
                    )
            out[name] = row
        return out

    def to_csv(self):
        buf = io.StringIO()
        cols = ["attack", "index", "success", "stop_reason", "iterations", "label", "prediction",
                "distance", "l_img", "l2", "linf", "ssim"]
        for d in self.defenses:
            cols += [f"{d}.wrong", f"{d}.prediction", f"{d}.distance"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            row = [r.attack, r.index, int(r.success), r.stop_reason, r.iterations,
                   _fmt(r.label), _fmt(r.prediction), _fmt(r.distance), _fmt(r.l_img),
                   _fmt(r.l2), _fmt(r.linf), _fmt(r.ssim)]
            for d in self.defenses:
                o = r.defended.get(d)
                row += ["", "", ""] if o is None else [int(o.wrong), _fmt(o.prediction), _fmt(o.distance)]
            w.writerow(row)
        return buf.getvalue()

    def summary(self):
        """Method x defense grid; verification cells carry mean distance in brackets."""
        agg = self.aggregates()
        head = f"{'Method':<10}{'Success':>9}{'SSIM':>8}" + "".join(f"{d:>18}" for d in self.defenses)
        lines = [f"task: {self.task}" + (f"   tau: {self.tau:.4f}" if self.tau is not None else ""),
                 "defense evasion rate (%)" + (" (face distance)" if self.task == "verification" else ""),
                 head, "-" * len(head)]
        for name, row in agg.items():
            cells = []
            for d in self.defenses:
                e = row[f"evasion[{d}]"] * 100
                if self.task == "verification":
                    cells.append(f"{e:6.2f} ({row[f'distance[{d}]']:.2f})")
                else:
                    cells.append(f"{e:6.2f}")
            lines.append(f"{name:<10}{row['success_rate'] * 100:>8.2f}%{row['mean_ssim']:>8.3f}"
                         + "".join(f"{c:>18}" for c in cells))
        if agg:
            first = next(iter(agg.values()))
            lines.append(f"examples attacked: {first['count']}"
                         + (f"   skipped (clean error): {first['clean_errors']}" if first["clean_errors"] else ""))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
