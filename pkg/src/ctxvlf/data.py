"""Exam-structured data model and line-delimited manifest I/O."""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image


class DRGrade(enum.IntEnum):
    noDR = 0
    mildDR = 1
    modDR = 2
    sevDR = 3
    prolDR = 4
    HR_prolDR = 5

    @property
    def token(self) -> str:
        return GRADE_TOKENS[self.value]

    @property
    def phrase(self) -> str:
        return GRADE_PHRASES[self.value]

    @classmethod
    def from_token(cls, token: str) -> "DRGrade":
        try:
            return cls(GRADE_TOKENS.index(token))
        except ValueError:
            raise ValueError(f"unknown DR grade token {token!r}") from None


GRADE_TOKENS = ("noDR", "mildDR", "modDR", "sevDR", "prolDR", "HR-prolDR")
GRADE_PHRASES = (
    "no diabetic retinopathy",
    "mild diabetic retinopathy",
    "moderate diabetic retinopathy",
    "severe diabetic retinopathy",
    "proliferative diabetic retinopathy",
    "high-risk proliferative diabetic retinopathy",
)

FINDINGS = ("DME", "glaucoma", "cataract", "hypertensive retinopathy", "macular dystrophy")
FINDING_PHRASES = {
    "DME": "diabetic macular edema",
    "glaucoma": "glaucoma",
    "cataract": "cataract",
    "hypertensive retinopathy": "hypertensive retinopathy",
    "macular dystrophy": "macular dystrophy",
}

LATERALITIES = ("left", "right")
FIELDS = ("macula", "disc")
QUALITIES = ("gradable", "ungradable")
CLINICAL_KEYS = ("diabetes_type", "years_diabetic", "treatment", "hypertension")

MIN_IMAGE_SIDE = 16


class ManifestError(ValueError):
    """Raised for unparseable manifest lines or records violating invariants."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        suffix = f" (field {field!r})" if field else ""
        super().__init__(f"{prefix}{message}{suffix}")


def check_pixels(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {pixels.shape}")
    if min(pixels.shape[:2]) < MIN_IMAGE_SIDE:
        raise ValueError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {pixels.shape[:2]}")
    if not np.isfinite(pixels).all() or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return pixels


@dataclass
class EyeImage:
    laterality: str
    field: str
    quality: str = "gradable"
    path: Optional[str] = None
    pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    # Directory that relative paths resolve against; set by load_manifest.
    root: Optional[str] = field(default=None, repr=False, compare=False)
    # Ground-truth lesion count, known only for synthetic images.
    lesion_count: Optional[int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ManifestError(f"bad laterality {self.laterality!r}", field="laterality")
        if self.field not in FIELDS:
            raise ManifestError(f"bad field {self.field!r}", field="field")
        if self.quality not in QUALITIES:
            raise ManifestError(f"bad quality {self.quality!r}", field="quality")
        if self.path is None and self.pixels is None:
            raise ManifestError("image needs a path or inline pixels", field="path")
        if self.pixels is not None:
            self.pixels = check_pixels(self.pixels)

    @property
    def gradable(self) -> bool:
        return self.quality == "gradable"

    def load(self) -> np.ndarray:
        """Return the H x W x 3 float32 pixel array, reading from disk if needed."""
        if self.pixels is not None:
            return np.asarray(self.pixels, dtype=np.float32)
        path = Path(self.path)
        if not path.is_absolute() and self.root is not None:
            path = Path(self.root) / path
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return check_pixels(arr)

    def to_json(self) -> dict:
        if self.path is None:
            raise ManifestError("inline-pixel images cannot be written to a manifest", field="path")
        return {"path": self.path, "laterality": self.laterality, "field": self.field, "quality": self.quality}


@dataclass
class EyeDiagnosis:
    dr_grade: DRGrade
    findings: tuple = ()
    other_text: str = ""

    def __post_init__(self):
        self.dr_grade = DRGrade(self.dr_grade)
        self.findings = tuple(self.findings)
        if len(set(self.findings)) != len(self.findings):
            raise ManifestError("duplicate findings", field="findings")
        for f in self.findings:
            if f not in FINDINGS:
                raise ManifestError(f"unknown finding {f!r}", field="findings")
        # canonical order keeps serialization stable
        self.findings = tuple(f for f in FINDINGS if f in self.findings)

    def to_json(self) -> dict:
        return {"dr_grade": self.dr_grade.token, "findings": list(self.findings), "other_text": self.other_text}

    @classmethod
    def from_json(cls, obj: dict) -> "EyeDiagnosis":
        return cls(
            dr_grade=DRGrade.from_token(obj["dr_grade"]),
            findings=tuple(obj.get("findings", ())),
            other_text=obj.get("other_text", ""),
        )


@dataclass
class ExamRecord:
    patient_id: str
    exam_id: str
    exam_date: dt.date
    images: list
    diagnosis_left: Optional[EyeDiagnosis] = None
    diagnosis_right: Optional[EyeDiagnosis] = None
    conclusion_text: str = ""
    clinical: dict = field(default_factory=dict)
    prior_exam_id: Optional[str] = None

    def __post_init__(self):
        if not self.patient_id:
            raise ManifestError("empty patient_id", field="patient_id")
        if not self.exam_id:
            raise ManifestError("empty exam_id", field="exam_id")
        if not 1 <= len(self.images) <= 4:
            raise ManifestError(f"expected 1..4 images, got {len(self.images)}", field="images")
        slots = [(im.laterality, im.field) for im in self.images]
        if len(set(slots)) != len(slots):
            raise ManifestError("two images share the same eye and field", field="images")
        if self.diagnosis_left is not None or self.diagnosis_right is not None:
            for im in self.images:
                if self.diagnosis(im.laterality) is None:
                    raise ManifestError(f"{im.laterality} image without a {im.laterality} diagnosis",
                                        field=f"diagnosis_{im.laterality}")
        if self.prior_exam_id == self.exam_id:
            raise ManifestError("exam lists itself as prior", field="prior_exam_id")

    def diagnosis(self, laterality: str) -> Optional[EyeDiagnosis]:
        return self.diagnosis_left if laterality == "left" else self.diagnosis_right

    def image(self, laterality: str, field_: str) -> Optional[EyeImage]:
        for im in self.images:
            if im.laterality == laterality and im.field == field_:
                return im
        return None

    def to_json(self) -> dict:
        obj = {
            "patient_id": self.patient_id,
            "exam_id": self.exam_id,
            "exam_date": self.exam_date.isoformat(),
            "images": [im.to_json() for im in self.images],
            "conclusion_text": self.conclusion_text,
            "clinical": self.clinical,
        }
        if self.diagnosis_left is not None:
            obj["diagnosis_left"] = self.diagnosis_left.to_json()
        if self.diagnosis_right is not None:
            obj["diagnosis_right"] = self.diagnosis_right.to_json()
        if self.prior_exam_id is not None:
            obj["prior_exam_id"] = self.prior_exam_id
        return obj

    @classmethod
    def from_json(cls, obj: dict, root: Optional[str] = None) -> "ExamRecord":
        for key in ("patient_id", "exam_id", "exam_date", "images"):
            if key not in obj:
                raise ManifestError("missing required field", field=key)
        try:
            date = dt.date.fromisoformat(obj["exam_date"])
        except (TypeError, ValueError):
            raise ManifestError(f"bad date {obj['exam_date']!r}", field="exam_date") from None
        images = []
        for im in obj["images"]:
            if "path" not in im:
                raise ManifestError("image without path", field="images")
            images.append(EyeImage(laterality=im.get("laterality"), field=im.get("field"),
                                   quality=im.get("quality", "gradable"), path=im["path"], root=root))
        diags = {}
        for side in LATERALITIES:
            raw = obj.get(f"diagnosis_{side}")
            if raw is not None:
                try:
                    diags[side] = EyeDiagnosis.from_json(raw)
                except (KeyError, ValueError) as exc:
                    if isinstance(exc, ManifestError):
                        raise ManifestError(str(exc), field=f"diagnosis_{side}") from None
                    raise ManifestError(str(exc), field=f"diagnosis_{side}.dr_grade") from None
        return cls(
            patient_id=str(obj["patient_id"]),
            exam_id=str(obj["exam_id"]),
            exam_date=date,
            images=images,
            diagnosis_left=diags.get("left"),
            diagnosis_right=diags.get("right"),
            conclusion_text=obj.get("conclusion_text", ""),
            clinical=dict(obj.get("clinical", {})),
            prior_exam_id=obj.get("prior_exam_id"),
        )


def check_prior_links(records: Iterable[ExamRecord]) -> None:
    """Validate prior_exam_id links among the given records.

    Links to exams absent from the collection are tolerated so that filtered
    or split manifests stay loadable.
    """
    by_id = {}
    for rec in records:
        if rec.exam_id in by_id:
            raise ManifestError(f"duplicate exam_id {rec.exam_id!r}", field="exam_id")
        by_id[rec.exam_id] = rec
    for rec in by_id.values():
        if rec.prior_exam_id is None or rec.prior_exam_id not in by_id:
            continue
        prior = by_id[rec.prior_exam_id]
        if prior.patient_id != rec.patient_id:
            raise ManifestError(f"exam {rec.exam_id}: prior exam belongs to another patient",
                                field="prior_exam_id")
        if not prior.exam_date < rec.exam_date:
            raise ManifestError(f"exam {rec.exam_id}: prior exam not earlier", field="prior_exam_id")


def dumps_record(record: ExamRecord) -> str:
    return json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def load_manifest(path: os.PathLike | str) -> list[ExamRecord]:
    path = Path(path)
    root = str(path.resolve().parent)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"parse error: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("record is not an object", line=lineno)
            try:
                records.append(ExamRecord.from_json(obj, root=root))
            except ManifestError as exc:
                raise ManifestError(str(exc), line=lineno, field=exc.field) from None
    check_prior_links(records)
    return records


def save_manifest(records: Iterable[ExamRecord], path: os.PathLike | str) -> None:
    records = list(records)
    check_prior_links(records)
    text = "".join(dumps_record(r) + "\n" for r in records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_images(records: Iterable[ExamRecord], out_dir: os.PathLike | str, subdir: str = "images") -> None:
    """Write inline pixels as PNG files under out_dir and point each image at its file."""
    out_dir = Path(out_dir)
    (out_dir / subdir).mkdir(parents=True, exist_ok=True)
    for rec in records:
        for im in rec.images:
            if im.pixels is None:
                continue
            rel = f"{subdir}/{rec.exam_id}_{im.laterality}_{im.field}.png"
            arr = np.round(np.clip(im.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(out_dir / rel, optimize=False)
            im.path = rel
            im.root = str(out_dir.resolve())


def patients_of(records: Iterable[ExamRecord]) -> set[str]:
    return {r.patient_id for r in records}


def relocate(records: Iterable[ExamRecord], new_dir: os.PathLike | str) -> list[ExamRecord]:
    """Copies of ``records`` whose relative image paths resolve from ``new_dir``."""
    new_dir = Path(new_dir).resolve()
    out = []
    for rec in records:
        images = []
        for im in rec.images:
            if im.path is None or Path(im.path).is_absolute() or im.root is None:
                images.append(im)
                continue
            target = Path(im.root) / im.path
            images.append(dataclasses.replace(im, path=Path(os.path.relpath(target, new_dir)).as_posix(),
                                              root=str(new_dir)))
        out.append(dataclasses.replace(rec, images=images))
    return out
