"""Export depth, poses, view features and model tensors in the layout `ovo` reads.

Models are plugged in as ``module:callable`` factories so this script carries
no ML dependency of its own:

* geometry factory -> callable ``frame (H×W×3 uint8) -> (depth H×W, R_w2c 3×3,
  t_w2c 3, (fx, fy, cx, cy))``; raising marks the frame's pose invalid.
* recognizer factory -> object with ``views(video_path) -> V×d``,
  ``lora_b() -> {layer: d×r}`` and ``head() -> (W C×d, b C, class_names)``.

    python ovo_export.py geometry --videos list.txt --fps 4 --out data --model pkg.mod:make
    python ovo_export.py features --videos list.txt --out data --model-dir model --model pkg.mod:make
"""

import argparse
import importlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

import ovo

VIEWS_PER_VIDEO = 15


@dataclass
class ExportJob:
    videos: list
    out_dir: str
    fps: float = 4.0
    model: str = ""
    model_dir: str = ""
    video_ids: dict = field(default_factory=dict)

    def video_id(self, path):
        return self.video_ids.get(path) or os.path.splitext(os.path.basename(path))[0]


def sample_times(duration_s, fps):
    n = math.floor(duration_s * fps + 1e-9)
    return [k / fps for k in range(n)]


def decode_frames(path, fps):
    """Yield RGB frames sampled at `fps` from a video file."""
    import cv2

    cap = cv2.VideoCapture(path)
    if not cap.isOpened():
        raise OSError(f"cannot open {path}")
    native = cap.get(cv2.CAP_PROP_FPS) or fps
    duration = cap.get(cv2.CAP_PROP_FRAME_COUNT) / native
    try:
        for t in sample_times(duration, fps):
            cap.set(cv2.CAP_PROP_POS_MSEC, t * 1000.0)
            ok, frame = cap.read()
            if not ok:
                break
            yield cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
    finally:
        cap.release()


def write_matrix(path, m):
    m = np.asarray(m, dtype=np.float32)
    ovo.write_tensor(path, list(m.shape), m.ravel().tolist())


def pose_record(frame_index, rotation, translation, intrinsics, valid=True):
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    return {
        "frame_index": int(frame_index),
        "rotation_w2c": np.asarray(rotation, dtype=float).tolist(),
        "translation_w2c": np.asarray(translation, dtype=float).tolist(),
        "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy},
        "valid": bool(valid),
    }


def export_geometry(job, model, frames=decode_frames):
    """One depth tensor and pose record per sampled frame. Returns frame counts."""
    counts = {}
    for path in job.videos:
        vid = job.video_id(path)
        vdir = os.path.join(job.out_dir, vid)
        os.makedirs(vdir, exist_ok=True)
        records = []
        last_k = (1.0, 1.0, 0.0, 0.0)
        for i, frame in enumerate(frames(path, job.fps)):
            try:
                depth, rot, trans, k = model(frame)
            except Exception as e:  # noqa: BLE001 - any model failure invalidates the frame
                print(f"{vid} frame {i}: {e}")
                records.append(pose_record(i, np.eye(3), np.zeros(3), last_k, valid=False))
                continue
            last_k = k
            write_matrix(os.path.join(vdir, f"depth_{i}.ovot"), depth)
            records.append(pose_record(i, rot, trans, k))
        pose_path = os.path.join(vdir, "poses.txt")
        with open(pose_path, "w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")
        # Re-read through the validating reader.
        ovo.read_poses(pose_path)
        counts[vid] = len(records)
    return counts


def export_features(job, recognizer):
    """V×d features per video, plus LoRA-B matrices and the head once."""
    dim = None
    for path in job.videos:
        vid = job.video_id(path)
        views = np.asarray(recognizer.views(path), dtype=np.float32)
        if views.ndim != 2:
            raise ValueError(f"{vid}: features must be views × d, got shape {views.shape}")
        if dim is None:
            dim = views.shape[1]
        elif views.shape[1] != dim:
            raise ValueError(f"{vid}: feature dim {views.shape[1]} differs from {dim}")
        if views.shape[0] != VIEWS_PER_VIDEO:
            print(f"{vid}: {views.shape[0]} views (expected {VIEWS_PER_VIDEO})")
        vdir = os.path.join(job.out_dir, vid)
        os.makedirs(vdir, exist_ok=True)
        write_matrix(os.path.join(vdir, "features.ovot"), views)

    model_dir = job.model_dir or os.path.join(job.out_dir, "model")
    os.makedirs(model_dir, exist_ok=True)
    for layer, b in sorted(recognizer.lora_b().items()):
        write_matrix(os.path.join(model_dir, f"lora_B_{layer}.ovot"), b)
    weight, bias, classes = recognizer.head()
    weight = np.asarray(weight, dtype=np.float32)
    if dim is not None and weight.shape[1] != dim:
        raise ValueError(f"head expects d={weight.shape[1]}, features have d={dim}")
    write_matrix(os.path.join(model_dir, "classifier_W.ovot"), weight)
    bias = np.asarray(bias, dtype=np.float32)
    ovo.write_tensor(os.path.join(model_dir, "classifier_b.ovot"), [bias.shape[0]], bias.tolist())
    with open(os.path.join(model_dir, "classes.txt"), "w") as f:
        f.write("\n".join(classes) + "\n")
    return dim


def load_factory(spec):
    module, _, name = spec.partition(":")
    if not name:
        raise ValueError(f"expected module:callable, got {spec!r}")
    return getattr(importlib.import_module(module), name)()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("what", choices=["geometry", "features"])
    ap.add_argument("--videos", required=True, help="text file with one video path per line")
    ap.add_argument("--out", required=True)
    ap.add_argument("--fps", type=float, default=4.0)
    ap.add_argument("--model", required=True, help="module:factory")
    ap.add_argument("--model-dir", default="")
    args = ap.parse_args(argv)

    with open(args.videos) as f:
        videos = [line.strip() for line in f if line.strip()]
    job = ExportJob(videos=videos, out_dir=args.out, fps=args.fps, model=args.model, model_dir=args.model_dir)
    model = load_factory(args.model)
    if args.what == "geometry":
        counts = export_geometry(job, model)
        print(f"exported {sum(counts.values())} frames from {len(counts)} videos")
    else:
        dim = export_features(job, model)
        print(f"exported features (d={dim}) for {len(videos)} videos")


if __name__ == "__main__":
    main()
