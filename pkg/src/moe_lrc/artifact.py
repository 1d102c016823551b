"""On-disk persistence: compressed artifacts and synthetic models.

Both formats are a ``manifest.json`` plus raw little-endian binary blobs, one
blob file per expert projection (or per layer for synthetic models), so
individual experts can be read independently.  Every blob carries a CRC32 in
the manifest; loads verify it and fail naming the exact record.  Round-trips
are bit-identical.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lowrank import Compensator
from .moe import Expert, MoELayer, MoEModel
from .quant import QuantConfig, QuantizedMatrix, pack_codes, packed_size_bytes, unpack_codes
from .ranks import PROJECTIONS

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    """Raised for malformed or inconsistent artifact files."""


class ArtifactVersionError(ArtifactError):
    """The file was written by an unsupported format version."""


class ArtifactChecksumError(ArtifactError):
    """A blob failed its CRC32 check."""


@dataclass
class ArtifactHeader:
    hidden: int
    ffn: int
    num_layers: int
    num_experts: int
    num_shared: int
    top_k: int
    quant: QuantConfig
    buckets: tuple[int, ...]
    avg_budget: int
    seed: int
    format_version: int = FORMAT_VERSION


@dataclass
class ProjRecord:
    """One projection's quantized weights plus its optional compensator."""

    layer: int
    expert: int
    projection: str
    qm: QuantizedMatrix
    comp: Compensator | None
    kurtosis: float
    rank: int

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.layer, self.expert, self.projection)


class CompressedModel:
    """In-memory compressed artifact: header plus per-projection records."""

    def __init__(self, header: ArtifactHeader):
        self.header = header
        self.records: dict[tuple[int, int, str], ProjRecord] = {}

    def add(self, record: ProjRecord) -> None:
        if record.key in self.records:
            raise ArtifactError(f"duplicate record {record.key}")
        self.records[record.key] = record

    def get(self, layer: int, expert: int, projection: str) -> ProjRecord:
        return self.records[(layer, expert, projection)]

    def iter_records(self):
        for key in sorted(self.records):
            yield self.records[key]

    def validate(self) -> None:
        h = self.header
        expected = h.num_layers * (h.num_experts + h.num_shared) * len(PROJECTIONS)
        if len(self.records) != expected:
            raise ArtifactError(
                f"expected {expected} projection records, found {len(self.records)}"
            )


def _qm_meta(qm: QuantizedMatrix) -> dict:
    return {"rows": qm.rows, "cols": qm.cols, "bits": qm.bits, "group_size": qm.group_size}


def _qm_arrays(qm: QuantizedMatrix) -> list[tuple[str, bytes]]:
    return [
        ("codes", pack_codes(qm.codes, qm.bits)),
        ("scales", np.ascontiguousarray(qm.scales, dtype="<f8").tobytes()),
        ("zero_points", np.ascontiguousarray(qm.zero_points, dtype="<f8").tobytes()),
    ]


def _qm_from_blob(meta: dict, blob: bytes, sections: dict, prefix: str) -> QuantizedMatrix:
    rows, cols = int(meta["rows"]), int(meta["cols"])
    bits, group_size = int(meta["bits"]), int(meta["group_size"])
    gpr = -(-cols // group_size)

    def sect(name: str) -> bytes:
        off, n = sections[f"{prefix}{name}"]
        return blob[off : off + n]

    codes = unpack_codes(sect("codes"), rows * cols, bits).reshape(rows, cols)
    scales = np.frombuffer(sect("scales"), dtype="<f8").reshape(rows, gpr).copy()
    zeros = np.frombuffer(sect("zero_points"), dtype="<f8").reshape(rows, gpr).copy()
    return QuantizedMatrix(rows=rows, cols=cols, bits=bits, group_size=group_size,
                           codes=codes, scales=scales, zero_points=zeros)


def _blob_name(layer: int, expert: int, projection: str) -> str:
    return f"l{layer:03d}_e{expert:03d}_{projection}.bin"


def save_artifact(cm: CompressedModel, path: str | Path) -> None:
    """Write manifest.json plus one blob per projection under ``path``."""
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)

    manifest_records = []
    for rec in cm.iter_records():
        arrays = [(f"qm.{n}", data) for n, data in _qm_arrays(rec.qm)]
        comp_meta = None
        if rec.comp is not None and rec.comp.rank > 0:
            if not rec.comp.factors_quantized():
                raise ArtifactError(
                    f"record {rec.key} holds raw (unquantized) factors; only "
                    "quantized compensators are persisted"
                )
            comp_meta = {
                "rank": rec.comp.rank,
                "factor_bits": rec.comp.factor_bits,
                "u": _qm_meta(rec.comp.u),
                "v": _qm_meta(rec.comp.v),
            }
            arrays += [(f"u.{n}", d) for n, d in _qm_arrays(rec.comp.u)]
            arrays += [(f"v.{n}", d) for n, d in _qm_arrays(rec.comp.v)]

        blob = b"".join(data for _, data in arrays)
        sections = {}
        offset = 0
        for name, data in arrays:
            sections[name] = [offset, len(data)]
            offset += len(data)

        blob_rel = f"blobs/{_blob_name(rec.layer, rec.expert, rec.projection)}"
        (root / blob_rel).write_bytes(blob)
        manifest_records.append(
            {
                "layer": rec.layer,
                "expert": rec.expert,
                "projection": rec.projection,
                "kurtosis": rec.kurtosis,
                "rank": rec.rank,
                "qm": _qm_meta(rec.qm),
                "comp": comp_meta,
                "blob": blob_rel,
                "crc32": zlib.crc32(blob),
                "sections": sections,
            }
        )

    h = cm.header
    manifest = {
        "format_version": h.format_version,
        "kind": "compressed-moe",
        "header": {
            "hidden": h.hidden,
            "ffn": h.ffn,
            "num_layers": h.num_layers,
            "num_experts": h.num_experts,
            "num_shared": h.num_shared,
            "top_k": h.top_k,
            "quant": {
                "bits": h.quant.bits,
                "group_size": h.quant.group_size,
                "hqq_iters": h.quant.hqq_iters,
                "hqq_shrink_p": h.quant.hqq_shrink_p,
            },
            "buckets": list(h.buckets),
            "avg_budget": h.avg_budget,
            "seed": h.seed,
        },
        "records": manifest_records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _check_version(manifest: dict, path: Path) -> None:
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(
            f"{path}: format_version {version} not supported (expected {FORMAT_VERSION})"
        )


def load_artifact(path: str | Path) -> CompressedModel:
    """Load an artifact directory, verifying per-blob checksums."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    _check_version(manifest, manifest_path)
    if manifest.get("kind") != "compressed-moe":
        raise ArtifactError(f"{manifest_path}: not a compressed artifact")

    hm = manifest["header"]
    header = ArtifactHeader(
        hidden=hm["hidden"],
        ffn=hm["ffn"],
        num_layers=hm["num_layers"],
        num_experts=hm["num_experts"],
        num_shared=hm["num_shared"],
        top_k=hm["top_k"],
        quant=QuantConfig(**hm["quant"]),
        buckets=tuple(hm["buckets"]),
        avg_budget=hm["avg_budget"],
        seed=hm["seed"],
        format_version=manifest["format_version"],
    )
    cm = CompressedModel(header)
    for rec in manifest["records"]:
        where = (rec["layer"], rec["expert"], rec["projection"])
        blob_path = root / rec["blob"]
        if not blob_path.exists():
            raise ArtifactError(f"missing blob for record {where}: {blob_path}")
        blob = blob_path.read_bytes()
        if zlib.crc32(blob) != rec["crc32"]:
            raise ArtifactChecksumError(
                f"checksum mismatch for layer {where[0]}, expert {where[1]}, "
                f"projection {where[2]}"
            )
        sections = rec["sections"]
        qm = _qm_from_blob(rec["qm"], blob, sections, "qm.")
        comp = None
        if rec["comp"] is not None:
            cmeta = rec["comp"]
            comp = Compensator(
                rank=int(cmeta["rank"]),
                u=_qm_from_blob(cmeta["u"], blob, sections, "u."),
                v=_qm_from_blob(cmeta["v"], blob, sections, "v."),
                projection_id=rec["projection"],
                factor_bits=int(cmeta["factor_bits"]),
            )
        cm.add(
            ProjRecord(
                layer=rec["layer"],
                expert=rec["expert"],
                projection=rec["projection"],
                qm=qm,
                comp=comp,
                kurtosis=rec["kurtosis"],
                rank=rec["rank"],
            )
        )
    cm.validate()
    return cm


def artifact_packed_bytes(cm: CompressedModel) -> dict[str, int]:
    """Code-only byte accounting of the artifact (weights vs compensators)."""
    weights = 0
    comps = 0
    for rec in cm.iter_records():
        weights += packed_size_bytes(rec.qm.rows, rec.qm.cols, rec.qm.bits)
        if rec.comp is not None and rec.comp.rank > 0:
            m, n = rec.qm.rows, rec.qm.cols
            comps += ((m + n) * rec.comp.rank * rec.comp.factor_bits + 7) // 8
    return {"weight_bytes": weights, "compensator_bytes": comps}


def save_model(model: MoEModel, path: str | Path) -> None:
    """Persist a synthetic model: manifest.json plus one blob per layer."""
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    layer_entries = []
    for layer_id, layer in enumerate(model.layers):
        arrays: list[tuple[str, bytes]] = [
            ("gate", np.ascontiguousarray(layer.gate, dtype="<f8").tobytes())
        ]
        for e, expert in enumerate(list(layer.experts) + list(layer.shared_experts)):
            for proj in PROJECTIONS:
                arrays.append(
                    (f"e{e:03d}.{proj}",
                     np.ascontiguousarray(getattr(expert, proj), dtype="<f8").tobytes())
                )
        blob = b"".join(d for _, d in arrays)
        sections = {}
        offset = 0
        for name, data in arrays:
            sections[name] = [offset, len(data)]
            offset += len(data)
        rel = f"blobs/layer{layer_id:03d}.bin"
        (root / rel).write_bytes(blob)
        layer_entries.append({"layer": layer_id, "blob": rel,
                              "crc32": zlib.crc32(blob), "sections": sections})

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "synthetic-moe",
        "hidden": model.hidden,
        "ffn": model.ffn,
        "num_layers": model.num_layers,
        "num_experts": model.num_experts,
        "num_shared": model.num_shared,
        "top_k": model.top_k,
        "seed": model.seed,
        "router_skew": model.router_skew,
        "tail_dofs": [("inf" if d == float("inf") else d) for d in model.tail_dofs],
        "layers": layer_entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_model(path: str | Path) -> MoEModel:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    _check_version(manifest, manifest_path)
    if manifest.get("kind") != "synthetic-moe":
        raise ArtifactError(f"{manifest_path}: not a synthetic model")

    hidden, ffn = manifest["hidden"], manifest["ffn"]
    num_experts, num_shared = manifest["num_experts"], manifest["num_shared"]
    layers = []
    for entry in sorted(manifest["layers"], key=lambda d: d["layer"]):
        blob = (root / entry["blob"]).read_bytes()
        if zlib.crc32(blob) != entry["crc32"]:
            raise ArtifactChecksumError(f"checksum mismatch for layer {entry['layer']}")

        def arr(name: str, shape) -> np.ndarray:
            off, n = entry["sections"][name]
            return np.frombuffer(blob[off : off + n], dtype="<f8").reshape(shape).copy()

        gate = arr("gate", (hidden, num_experts))
        experts = []
        for e in range(num_experts + num_shared):
            experts.append(
                Expert(w1=arr(f"e{e:03d}.w1", (ffn, hidden)),
                       w3=arr(f"e{e:03d}.w3", (ffn, hidden)),
                       w2=arr(f"e{e:03d}.w2", (hidden, ffn)))
            )
        layers.append(MoELayer(gate=gate, experts=experts[:num_experts],
                               shared_experts=experts[num_experts:]))
    return MoEModel(
        hidden=hidden,
        ffn=ffn,
        layers=layers,
        top_k=manifest["top_k"],
        seed=manifest["seed"],
        router_skew=manifest["router_skew"],
        tail_dofs=tuple(float(d) for d in manifest["tail_dofs"]),
    )
