"""File artifacts exchanged between pipeline stages."""

from __future__ import annotations

import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import attrs
import numpy as np
import pandas as pd

from .geometry import TrxPose
from .synthesis import DirectionalCfr, GroundTruthPath

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
SCENE_FILE = "scene.json"
RUN_CONFIG_FILE = "run_config.json"
CFR_DTYPE = np.dtype("<c8")


class ArtifactError(ValueError):
    pass


def cfr_header_name(pose_index: int) -> str:
    return f"cfr_pose{pose_index:02d}.json"


def cfr_data_name(pose_index: int) -> str:
    return f"cfr_pose{pose_index:02d}.bin"


def write_json(data: Any, path: str) -> None:
    with open(path, "w") as fout:
        json.dump(data, fout, sort_keys=True, indent=2)
        fout.write("\n")


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing artifact {path!r}")
    with open(path) as fin:
        try:
            return json.load(fin)
        except json.JSONDecodeError:
            raise ArtifactError(f"failed to parse {path!r} file")


def write_frame(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False)


def read_frame(path: str, columns: Sequence[str]) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing artifact {path!r}")
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=list(columns))
    for column in columns:
        if column not in frame.columns:
            raise ArtifactError(f"{path!r} lacks column {column!r}")
    return frame


@attrs.define
class RunManifest:
    scene: str
    config: Optional[str]
    poses: List[int]
    seed: int
    version: str
    stages: List[Dict[str, Any]] = attrs.field(factory=list)

    def add_stage(self, name: str, outputs: Sequence[str]) -> None:
        self.stages.append({"name": name, "outputs": sorted(outputs)})

    def require(self, directory: str, names: Sequence[str]) -> None:
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing artifact {path!r}")

    def save(self, directory: str) -> None:
        write_json(attrs.asdict(self), os.path.join(directory, MANIFEST_FILE))

    @classmethod
    def load(cls, directory: str) -> RunManifest:
        data = read_json(os.path.join(directory, MANIFEST_FILE))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ArtifactError(f"malformed manifest in {directory!r}: {exc}") from exc


def _truth_to_json(path: GroundTruthPath) -> Dict[str, Any]:
    return {
        "amplitude_re": path.amplitude.real,
        "amplitude_im": path.amplitude.imag,
        "delay_s": path.delay_s,
        "azimuth_deg": path.azimuth_deg,
        "origin": path.origin.value,
        "kind": path.kind,
        "wall_indices": list(path.wall_indices),
    }


def _truth_from_json(data: Dict[str, Any]) -> GroundTruthPath:
    return GroundTruthPath(
        amplitude=complex(data["amplitude_re"], data["amplitude_im"]),
        delay_s=data["delay_s"],
        azimuth_deg=data["azimuth_deg"],
        origin=data["origin"],
        kind=data.get("kind", "specular"),
        wall_indices=data.get("wall_indices", ()),
    )


def cfr_header(cfr: DirectionalCfr, with_truth: bool = True) -> Dict[str, Any]:
    header: Dict[str, Any] = {
        "pose_index": cfr.pose_index,
        "angles": [float(angle) for angle in cfr.angles_deg],
        "f_start": float(cfr.freqs_hz[0]),
        "f_stop": float(cfr.freqs_hz[-1]),
        "n_freq": len(cfr.freqs_hz),
        "seed": cfr.seed,
        "noise_floor_db": cfr.noise_floor_db,
        "data_file": cfr_data_name(cfr.pose_index),
    }
    if cfr.pose is not None:
        header["pose"] = {"center": list(cfr.pose.center), "r": cfr.pose.azimuth_radius_m}
    if with_truth and cfr.truth is not None:
        header["truth"] = [_truth_to_json(path) for path in cfr.truth]
    return header


def write_cfr(cfr: DirectionalCfr, directory: str, with_truth: bool = True) -> List[str]:
    names = [cfr_header_name(cfr.pose_index), cfr_data_name(cfr.pose_index)]
    write_json(cfr_header(cfr, with_truth), os.path.join(directory, names[0]))
    with open(os.path.join(directory, names[1]), "wb") as fout:
        fout.write(cfr.data.astype(CFR_DTYPE).tobytes())
    logger.debug(f"wrote {names[0]} and {names[1]}")
    return names


def read_cfr_header(path: str) -> Dict[str, Any]:
    header = read_json(path)
    for key in ("pose_index", "angles", "f_start", "f_stop", "n_freq", "seed"):
        if key not in header:
            raise ArtifactError(f"{path!r} lacks field {key!r}")
    return dict(header)


def read_cfr(header_path: str) -> DirectionalCfr:
    header = read_cfr_header(header_path)
    directory = os.path.dirname(header_path)
    data_path = os.path.join(directory, header.get("data_file", cfr_data_name(header["pose_index"])))
    n_angles, n_freq = len(header["angles"]), int(header["n_freq"])
    expected = n_angles * n_freq * CFR_DTYPE.itemsize
    if not os.path.exists(data_path):
        raise FileNotFoundError(f"missing artifact {data_path!r}")
    size = os.path.getsize(data_path)
    if size != expected:
        raise ArtifactError(f"{data_path!r} holds {size} bytes, expected {expected}")
    raw = np.fromfile(data_path, dtype=CFR_DTYPE).reshape(n_angles, n_freq)
    pose = None
    if "pose" in header:
        pose = TrxPose(
            center=header["pose"]["center"],
            azimuth_radius_m=header["pose"]["r"],
            pose_index=header["pose_index"],
        )
    truth = None
    if "truth" in header:
        try:
            truth = [_truth_from_json(path) for path in header["truth"]]
        except KeyError as exc:
            raise ArtifactError(f"{header_path!r} truth entry lacks field {exc.args[0]!r}") from exc
    return DirectionalCfr(
        pose_index=int(header["pose_index"]),
        angles_deg=np.asarray(header["angles"], dtype=float),
        freqs_hz=np.linspace(header["f_start"], header["f_stop"], n_freq),
        data=raw.astype(complex),
        truth=truth,
        seed=int(header["seed"]),
        noise_floor_db=float(header.get("noise_floor_db", -120.0)),
        pose=pose,
    )
