"""Segmentation metrics, result tables and image galleries."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .data import DatasetManifest, SegDataset, batch_iterator, from_model_range
from .nets import TABLE1, count_parameters

CLASSES = ("background", "digit")
THRESHOLD = 0.5
ROW_ORDER = ("fcn", "sgan_s", "uncond", "in_cond", "out_cond")
CSV_HEADER = ("variant", "src_iou_back", "src_iou_digit", "src_miou",
              "tgt_iou_back", "tgt_iou_digit", "tgt_miou")


# --------------------------------------------------------------------------- IoU

def _as_bool(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x)
    if x.dtype != bool and not np.isin(x, (0, 1)).all():
        raise ValueError("masks must be binary; threshold predictions first")
    return x.astype(bool)


def confusion_counts(pred_binary, target_binary, class_id: int) -> tuple[int, int, int]:
    """(TP, FP, FN) for ``class_id`` (1 = digit, 0 = background) over the whole batch."""
    p, t = _as_bool(pred_binary), _as_bool(target_binary)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if class_id == 0:
        p, t = ~p, ~t
    elif class_id != 1:
        raise ValueError(f"class_id must be 0 or 1, got {class_id}")
    tp = int(np.count_nonzero(p & t))
    return tp, int(np.count_nonzero(p & ~t)), int(np.count_nonzero(~p & t))


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def iou(pred_binary, target_binary, class_id: int = 1) -> float:
    """Global-count IoU; a class absent from both prediction and target scores 1."""
    return iou_from_counts(*confusion_counts(pred_binary, target_binary, class_id))


def binarize(pred, threshold: float = THRESHOLD):
    return pred >= threshold


# --------------------------------------------------------------------------- reports

@dataclass
class SegReport:
    per_class_iou: dict[str, float]
    miou: float
    dataset: dict = field(default_factory=dict)
    checkpoint: str = ""
    n_samples: int = 0

    @classmethod
    def from_counts(cls, counts: dict[str, list[int]], **meta) -> "SegReport":
        per = {c: iou_from_counts(*counts[c]) for c in CLASSES}
        return cls(per, float(np.mean(list(per.values()))), **meta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SegReport":
        return cls(**data)


def segmentation_predictor(state):
    """Eval-mode ``images -> probabilities`` callable for a loaded training state."""
    nets = state.nets
    for m in nets.values():
        m.eval()
    if "fcn" in nets:
        return nets["fcn"]
    if "S" in nets:
        G, S = nets["G"], nets["S"]
        return lambda x: S(G.encode(x, 0))
    raise ValueError(f"checkpoint of variant {state.config.variant!r} has no segmenter")


def evaluate_segmenter(checkpoint, manifest, variant: str | None = None, limit: int | None = None,
                       batch_size: int = 256, channels: int | None = None) -> SegReport:
    """Threshold-0.5 IoU of both classes over (the first ``limit`` samples of) a split.

    ``checkpoint`` is a path to a training checkpoint or an already loaded state.
    """
    from .training import checkpoint_load

    state = checkpoint_load(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    if variant is not None and state.config.variant != variant:
        raise ValueError(f"checkpoint holds variant {state.config.variant!r}, not {variant!r}")
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    ds = SegDataset(manifest, limit=limit, channels=channels or state.config.image_channels)
    predict = segmentation_predictor(state)
    counts = {c: [0, 0, 0] for c in CLASSES}
    with torch.no_grad():
        for x, y in batch_iterator(ds, batch_size):
            pred = binarize(predict(x))
            for cid, c in enumerate(CLASSES):
                for k, v in enumerate(confusion_counts(pred, y, cid)):
                    counts[c][k] += v
    return SegReport.from_counts(counts, dataset=manifest.header(),
                                 checkpoint=str(checkpoint) if isinstance(checkpoint, (str, Path)) else "",
                                 n_samples=len(ds))


# --------------------------------------------------------------------------- tables

@dataclass
class ResultsTable:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["{:<10}".format("variant") + "".join(f"{h:>15}" for h in CSV_HEADER[1:])]
        for r in self.rows:
            lines.append(f"{r['variant']:<10}" + "".join(f"{r[h]:>15.3f}" for h in CSV_HEADER[1:]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"columns": list(CSV_HEADER), "rows": self.rows}, indent=1) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ResultsTable":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return cls([{k: (v if k == "variant" else float(v)) for k, v in r.items()} for r in reader])

    def write(self, directory: str | Path, stem: str = "results") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.txt").write_text(self.to_text())
        (d / f"{stem}.json").write_text(self.to_json())


def results_table(reports: dict[str, tuple[SegReport, SegReport]]) -> ResultsTable:
    """Rows of (source report, target report) per variant in the canonical order."""
    order = [v for v in ROW_ORDER if v in reports] + sorted(v for v in reports if v not in ROW_ORDER)
    rows = []
    for v in order:
        src, tgt = reports[v]
        rows.append({"variant": v,
                     "src_iou_back": src.per_class_iou["background"],
                     "src_iou_digit": src.per_class_iou["digit"], "src_miou": src.miou,
                     "tgt_iou_back": tgt.per_class_iou["background"],
                     "tgt_iou_digit": tgt.per_class_iou["digit"], "tgt_miou": tgt.miou})
    return ResultsTable(rows)


@dataclass
class ParamTable:
    rows: list[dict]
    ratio: float | None

    def to_text(self) -> str:
        lines = [f"{'network':<16}{'count':>12}{'reference':>12}{'delta':>10}"]
        for r in self.rows:
            ref = "" if r["reference"] is None else r["reference"]
            delta = "" if r["delta"] is None else f"{r['delta']:+d}"
            lines.append(f"{r['network']:<16}{r['count']:>12}{ref!s:>12}{delta:>10}")
        if self.ratio is not None:
            lines.append(f"stargan / cyclegan parameter ratio: {self.ratio:.5f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "ratio": self.ratio}, indent=1) + "\n"


def param_table(nets: dict[str, torch.nn.Module], reference: dict[str, int] = TABLE1) -> ParamTable:
    """Per-network parameter counts, deltas to ``reference`` and the StarGAN/CycleGAN ratio.

    Networks named ``stargan/...`` and ``cyclegan/...`` feed the ratio.
    """
    rows = []
    for name, net in nets.items():
        n = count_parameters(net)
        ref = reference.get(name)
        rows.append({"network": name, "count": n, "reference": ref,
                     "delta": None if ref is None else n - ref})
    star = sum(r["count"] for r in rows if r["network"].startswith("stargan/"))
    cyc = sum(r["count"] for r in rows if r["network"].startswith("cyclegan/"))
    return ParamTable(rows, star / cyc if star and cyc else None)


# --------------------------------------------------------------------------- images

def to_raster(images) -> np.ndarray:
    """(N, C, H, W) tensor in [-1, 1] -> (N, H, W, 3) uint8."""
    x = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    x = np.clip(from_model_range(x.astype(np.float32)), 0, 1)
    return mask_raster(x)


def mask_raster(images) -> np.ndarray:
    """(N, C, H, W) or (N, H, W) array in [0, 1] -> (N, H, W, 3) uint8."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1] == 1:
        x = np.repeat(x, 3, axis=1)
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8).transpose(0, 2, 3, 1)


def image_grid(rows: list[tuple[str, np.ndarray]], path: str | Path, label_width: int = 110,
               pad: int = 2) -> Path:
    """Stack labeled strips of (N, H, W, 3) uint8 rasters into one PNG."""
    if not rows:
        raise ValueError("no rows to render")
    h = rows[0][1].shape[1]
    ncol = max(len(r) for _, r in rows)
    width = label_width + ncol * (h + pad)
    canvas = Image.new("RGB", (width, len(rows) * (h + pad)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, (label, raster) in enumerate(rows):
        y0 = i * (h + pad)
        draw.text((4, y0 + h // 2 - 6), label, fill=(0, 0, 0), font=font)
        for j, img in enumerate(raster):
            tile = Image.fromarray(np.ascontiguousarray(img))
            if tile.size[1] != h:
                tile = tile.resize((round(tile.size[0] * h / tile.size[1]), h), Image.NEAREST)
            canvas.paste(tile, (label_width + j * (h + pad), y0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path


def translation_gallery(generator_checkpoint, manifest_a, manifest_b, n: int, path) -> Path:
    """Input, translation and cycle reconstruction rows for both directions."""
    from .training import checkpoint_load

    state = (checkpoint_load(generator_checkpoint)
             if isinstance(generator_checkpoint, (str, Path)) else generator_checkpoint)
    nets = state.nets
    for m in nets.values():
        m.eval()
    if "G" in nets:
        G = nets["G"]
        a_to_b, b_to_a = (lambda x: G(x, 1)), (lambda x: G(x, 0))
    elif "G_ab" in nets:
        a_to_b, b_to_a = nets["G_ab"], nets["G_ba"]
    else:
        raise ValueError("checkpoint holds no translation generator")
    c = state.config.image_channels
    xa, _ = SegDataset(manifest_a, limit=n, channels=c).batch(range(n), masks=False)
    xb, _ = SegDataset(manifest_b, limit=n, channels=c).batch(range(n), masks=False)
    with torch.no_grad():
        ab, ba = a_to_b(xa), b_to_a(xb)
        rows = [("A", xa), ("A -> B", ab), ("A -> B -> A", b_to_a(ab)),
                ("B", xb), ("B -> A", ba), ("B -> A -> B", a_to_b(ba))]
    return image_grid([(label, to_raster(t)) for label, t in rows], path)


def segmentation_gallery(checkpoint, manifest, n: int, path) -> Path:
    """Input images, ground-truth masks and thresholded predictions."""
    from .training import checkpoint_load

    state = checkpoint_load(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    ds = SegDataset(manifest, limit=n, channels=state.config.image_channels)
    x, y = ds.batch(range(len(ds)))
    with torch.no_grad():
        pred = binarize(segmentation_predictor(state)(x)).float()
    rows = [("image", to_raster(x)), ("mask", mask_raster(y.numpy())),
            ("prediction", mask_raster(pred.numpy()))]
    return image_grid(rows, path)
