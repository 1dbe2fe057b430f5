"""Image corruption functions with mandatory [0,1] pixel clipping.

Images are H x W x 3 float64 arrays with every value in [0,1]. Seven
corruption kinds are supported (brightness +/-, saturation +/- via HSL,
Gaussian noise, Gaussian blur, additive salt-and-pepper), plus ordered
composition into the Combined+ / Combined- sets. Every function clips
its output; identity parameters are bitwise no-ops; stochastic kinds are
pure functions of (input, params, stream).
"""

from __future__ import annotations

import configparser
import enum
import importlib.resources
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .rng import RandomStream

CHANNELS = 3


class AugKind(str, enum.Enum):
    BRIGHTNESS_PLUS = "brightness_plus"
    BRIGHTNESS_MINUS = "brightness_minus"
    SATURATION_PLUS = "saturation_plus"
    SATURATION_MINUS = "saturation_minus"
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    ADDITIVE_SAP = "additive_sap"


# short labels used in reports and metric grids
KIND_LABELS = {
    AugKind.BRIGHTNESS_PLUS: "B+",
    AugKind.BRIGHTNESS_MINUS: "B-",
    AugKind.GAUSSIAN_BLUR: "GB",
    AugKind.GAUSSIAN_NOISE: "GN",
    AugKind.ADDITIVE_SAP: "SAP",
    AugKind.SATURATION_PLUS: "S+",
    AugKind.SATURATION_MINUS: "S-",
}

_STOCHASTIC = {AugKind.GAUSSIAN_NOISE, AugKind.ADDITIVE_SAP}

# Combined sets compose photometric -> blur -> noise -> SAP so that the
# noise stays unsmoothed; the order is fixed and recorded in run manifests.
COMBINED_ORDER_PLUS = (
    AugKind.BRIGHTNESS_PLUS, AugKind.SATURATION_PLUS, AugKind.GAUSSIAN_BLUR,
    AugKind.GAUSSIAN_NOISE, AugKind.ADDITIVE_SAP)
COMBINED_ORDER_MINUS = (
    AugKind.BRIGHTNESS_MINUS, AugKind.SATURATION_MINUS, AugKind.GAUSSIAN_BLUR,
    AugKind.GAUSSIAN_NOISE, AugKind.ADDITIVE_SAP)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != CHANNELS:
        raise DimensionError(
            f"image must be HxWx{CHANNELS}, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ContractError("image values must lie in [0,1]")
    return img


def clip01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# individual corruption functions


def brightness(img: np.ndarray, delta: float) -> np.ndarray:
    """Add a constant to every channel, then clip."""
    img = check_image(img)
    if delta == 0.0:
        return img.copy()
    return clip01(img + float(delta))


def _rgb_to_hsl(img: np.ndarray):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    lum = (maxc + minc) / 2.0
    delta = maxc - minc
    chromatic = delta > 0.0
    safe = np.where(chromatic, delta, 1.0)

    denom = 1.0 - np.abs(maxc + minc - 1.0)
    sat = np.where(chromatic, delta / np.where(denom > 0.0, denom, 1.0), 0.0)

    h6 = np.where(
        maxc == r, ((g - b) / safe) % 6.0,
        np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    hue = np.where(chromatic, h6 / 6.0, 0.0)
    return hue, sat, lum


def _hue_ramp(m1: np.ndarray, m2: np.ndarray, hue: np.ndarray) -> np.ndarray:
    hue = hue % 1.0
    return np.select(
        [hue < 1.0 / 6.0, hue < 0.5, hue < 2.0 / 3.0],
        [m1 + (m2 - m1) * 6.0 * hue, m2, m1 + (m2 - m1) * (2.0 / 3.0 - hue) * 6.0],
        default=m1)


def _hsl_to_rgb(hue: np.ndarray, sat: np.ndarray, lum: np.ndarray) -> np.ndarray:
    m2 = np.where(lum <= 0.5, lum * (1.0 + sat), lum + sat - lum * sat)
    m1 = 2.0 * lum - m2
    return np.stack([
        _hue_ramp(m1, m2, hue + 1.0 / 3.0),
        _hue_ramp(m1, m2, hue),
        _hue_ramp(m1, m2, hue - 1.0 / 3.0),
    ], axis=-1)


def saturation(img: np.ndarray, alpha: float) -> np.ndarray:
    """Scale saturation in HSL space by alpha >= 0, then clip.

    alpha == 0 collapses to grayscale (all channels equal the luminance);
    alpha == 1 is a bitwise no-op.
    """
    img = check_image(img)
    alpha = float(alpha)
    if alpha < 0.0:
        raise ParameterError(f"saturation: alpha must be >= 0, got {alpha}")
    if alpha == 1.0:
        return img.copy()
    hue, sat, lum = _rgb_to_hsl(img)
    sat = np.clip(alpha * sat, 0.0, 1.0)
    return clip01(_hsl_to_rgb(hue, sat, lum))


def gaussian_noise(img: np.ndarray, mu: float, sigma: float,
                   rng: RandomStream) -> np.ndarray:
    """Add i.i.d. normal noise per pixel per channel, then clip."""
    img = check_image(img)
    if sigma < 0.0:
        raise ParameterError(f"gaussian_noise: sigma must be >= 0, got {sigma}")
    if sigma == 0.0 and mu == 0.0:
        return img.copy()
    if sigma == 0.0:
        return clip01(img + float(mu))
    return clip01(img + rng.normal(float(mu), float(sigma), img.shape))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized size x size Gaussian kernel (entries sum to 1)."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"gaussian kernel size must be odd, got {size}")
    if sigma <= 0.0:
        raise ParameterError(f"gaussian kernel sigma must be > 0, got {sigma}")
    c = size // 2
    ax = np.arange(size, dtype=np.float64) - c
    sq = ax[:, None] ** 2 + ax[None, :] ** 2
    k = np.exp(-sq / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Per-channel convolution with a normalized Gaussian, reflect padding.

    Written as center + sum k_ij * (shifted - center) so a constant image
    is an exact fixed point.
    """
    img = check_image(img)
    kernel = gaussian_kernel(size, sigma)
    r = size // 2
    if r == 0:
        return img.copy()
    h, w = img.shape[:2]
    if h <= r or w <= r:
        raise DimensionError(
            f"gaussian_blur: image {h}x{w} too small for reflect pad {r}")
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    out = img.copy()
    for i in range(size):
        for j in range(size):
            if i == r and j == r:
                continue
            out += kernel[i, j] * (padded[i:i + h, j:j + w] - img)
    return clip01(out)


def additive_sap(img: np.ndarray, p: float, q: float, rho: float,
                 rng: RandomStream) -> np.ndarray:
    """Additive salt-and-pepper: per-pixel Bernoulli(p) mask shared across
    channels; affected pixels get +rho with probability q, else -rho."""
    img = check_image(img)
    if not (0.0 <= p <= 1.0) or not (0.0 <= q <= 1.0):
        raise ParameterError(f"additive_sap: p, q must be in [0,1], got {p}, {q}")
    if rho < 0.0:
        raise ParameterError(f"additive_sap: rho must be >= 0, got {rho}")
    if p == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    mask = rng.random((h, w)) < p
    sign = np.where(rng.random((h, w)) < q, 1.0, -1.0)
    return clip01(img + (float(rho) * sign * mask)[:, :, None])


# ---------------------------------------------------------------------------
# parameterized specs and sets


@dataclass(frozen=True)
class AugmentationSpec:
    """One corruption kind plus the parameters relevant to it."""

    kind: AugKind
    delta: float | None = None        # brightness offset
    alpha: float | None = None        # saturation factor, >= 0
    mu: float = 0.0                   # noise / blur-kernel mean (0 in presets)
    sigma: float | None = None        # noise or blur std, >= 0
    size: int | None = None           # blur kernel size, odd >= 1
    prob: float | None = None         # SAP pixel probability, in [0,1]
    salt_ratio: float | None = None   # SAP salt-to-pepper ratio, in [0,1]
    strength: float | None = None     # SAP amplitude rho, >= 0

    def __post_init__(self):
        k = self.kind
        need = {
            AugKind.BRIGHTNESS_PLUS: ("delta",),
            AugKind.BRIGHTNESS_MINUS: ("delta",),
            AugKind.SATURATION_PLUS: ("alpha",),
            AugKind.SATURATION_MINUS: ("alpha",),
            AugKind.GAUSSIAN_NOISE: ("sigma",),
            AugKind.GAUSSIAN_BLUR: ("size", "sigma"),
            AugKind.ADDITIVE_SAP: ("prob", "salt_ratio", "strength"),
        }[k]
        for field in need:
            if getattr(self, field) is None:
                raise ParameterError(f"{k.value} spec requires '{field}'")
        if self.alpha is not None and self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.sigma is not None and self.sigma < 0:
            raise ParameterError("sigma must be >= 0")
        if self.size is not None and (self.size < 1 or self.size % 2 == 0):
            raise ParameterError("blur size must be odd and >= 1")
        for name in ("prob", "salt_ratio"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ParameterError(f"{name} must be in [0,1]")
        if self.strength is not None and self.strength < 0:
            raise ParameterError("strength must be >= 0")

    def params(self) -> dict[str, float]:
        """The parameters relevant to this kind, as a plain dict."""
        fields = {
            AugKind.BRIGHTNESS_PLUS: ("delta",),
            AugKind.BRIGHTNESS_MINUS: ("delta",),
            AugKind.SATURATION_PLUS: ("alpha",),
            AugKind.SATURATION_MINUS: ("alpha",),
            AugKind.GAUSSIAN_NOISE: ("mu", "sigma"),
            AugKind.GAUSSIAN_BLUR: ("size", "mu", "sigma"),
            AugKind.ADDITIVE_SAP: ("prob", "salt_ratio", "strength"),
        }[self.kind]
        return {f: getattr(self, f) for f in fields}

    def with_param(self, name: str, value: float) -> "AugmentationSpec":
        if name == "size":
            value = int(value)
        return replace(self, **{name: value})

    def is_identity(self) -> bool:
        k = self.kind
        if k in (AugKind.BRIGHTNESS_PLUS, AugKind.BRIGHTNESS_MINUS):
            return self.delta == 0.0
        if k in (AugKind.SATURATION_PLUS, AugKind.SATURATION_MINUS):
            return self.alpha == 1.0
        if k == AugKind.GAUSSIAN_NOISE:
            return self.sigma == 0.0 and self.mu == 0.0
        if k == AugKind.ADDITIVE_SAP:
            return self.prob == 0.0 or self.strength == 0.0
        return False


def apply_spec(spec: AugmentationSpec, img: np.ndarray,
               rng: RandomStream | None = None) -> np.ndarray:
    k = spec.kind
    if k in _STOCHASTIC and rng is None:
        raise ContractError(f"{k.value} needs a RandomStream")
    if k in (AugKind.BRIGHTNESS_PLUS, AugKind.BRIGHTNESS_MINUS):
        return brightness(img, spec.delta)
    if k in (AugKind.SATURATION_PLUS, AugKind.SATURATION_MINUS):
        return saturation(img, spec.alpha)
    if k == AugKind.GAUSSIAN_NOISE:
        return gaussian_noise(img, spec.mu, spec.sigma, rng)
    if k == AugKind.GAUSSIAN_BLUR:
        return gaussian_blur(img, spec.size, spec.sigma)
    return additive_sap(img, spec.prob, spec.salt_ratio, spec.strength, rng)


@dataclass(frozen=True)
class AugmentationSet:
    """An ordered list of specs applied in sequence by `compose`."""

    name: str
    specs: tuple[AugmentationSpec, ...]

    def __post_init__(self):
        kinds = [s.kind for s in self.specs]
        if self.name == "combined_plus":
            if tuple(kinds) != COMBINED_ORDER_PLUS:
                raise ContractError(
                    "combined_plus must contain exactly "
                    f"{[k.value for k in COMBINED_ORDER_PLUS]} in order, "
                    f"got {[k.value for k in kinds]}")
        elif self.name == "combined_minus":
            if tuple(kinds) != COMBINED_ORDER_MINUS:
                raise ContractError(
                    "combined_minus must contain exactly "
                    f"{[k.value for k in COMBINED_ORDER_MINUS]} in order, "
                    f"got {[k.value for k in kinds]}")

    def kinds(self) -> tuple[AugKind, ...]:
        return tuple(s.kind for s in self.specs)


def single_set(spec: AugmentationSpec) -> AugmentationSet:
    return AugmentationSet(name=f"single/{spec.kind.value}", specs=(spec,))


def combined_set(plus: bool,
                 specs_by_kind: Mapping[AugKind, AugmentationSpec]) -> AugmentationSet:
    order = COMBINED_ORDER_PLUS if plus else COMBINED_ORDER_MINUS
    try:
        specs = tuple(specs_by_kind[k] for k in order)
    except KeyError as exc:
        raise ContractError(f"combined set missing spec for {exc}") from exc
    return AugmentationSet(
        name="combined_plus" if plus else "combined_minus", specs=specs)


def compose(img: np.ndarray, aug_set: AugmentationSet,
            rng: RandomStream | None = None) -> np.ndarray:
    """Apply every spec in stored order (each clips), then clip once more."""
    if not aug_set.specs:
        raise ContractError("compose: augmentation set is empty")
    out = check_image(img)
    for spec in aug_set.specs:
        out = apply_spec(spec, out, rng)
    return clip01(out)


def _blur_batch(stack: np.ndarray, size: int, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(size, sigma)
    r = size // 2
    if r == 0:
        return stack.copy()
    h, w = stack.shape[1:3]
    padded = np.pad(stack, ((0, 0), (r, r), (r, r), (0, 0)), mode="reflect")
    out = stack.copy()
    for i in range(size):
        for j in range(size):
            if i == r and j == r:
                continue
            out += kernel[i, j] * (padded[:, i:i + h, j:j + w] - stack)
    return clip01(out)


def compose_batch(stack: np.ndarray, aug_set: AugmentationSet,
                  streams) -> np.ndarray:
    """Batched `compose` over a (B,H,W,3) stack with one stream per image.

    Bitwise identical to composing each image with its own stream: the
    deterministic kinds are pure elementwise/stencil math applied in the
    same order, and each stream consumes draws in the same spec order.
    """
    if not aug_set.specs:
        raise ContractError("compose_batch: augmentation set is empty")
    b, h, w = stack.shape[:3]
    out = np.ascontiguousarray(stack, dtype=np.float64).copy()
    for spec in aug_set.specs:
        k = spec.kind
        if k in (AugKind.BRIGHTNESS_PLUS, AugKind.BRIGHTNESS_MINUS):
            if spec.delta != 0.0:
                out = clip01(out + spec.delta)
        elif k in (AugKind.SATURATION_PLUS, AugKind.SATURATION_MINUS):
            if spec.alpha != 1.0:
                hue, sat, lum = _rgb_to_hsl(out)
                out = clip01(_hsl_to_rgb(
                    hue, np.clip(spec.alpha * sat, 0.0, 1.0), lum))
        elif k == AugKind.GAUSSIAN_BLUR:
            out = _blur_batch(out, spec.size, spec.sigma)
        elif k == AugKind.GAUSSIAN_NOISE:
            if spec.sigma != 0.0 or spec.mu != 0.0:
                noise = np.empty_like(out)
                for row in range(b):
                    noise[row] = streams[row].normal(spec.mu, spec.sigma,
                                                     (h, w, 3))
                out = clip01(out + noise)
        else:   # additive SAP
            if spec.prob > 0.0:
                delta = np.empty((b, h, w))
                for row in range(b):
                    mask = streams[row].random((h, w)) < spec.prob
                    sign = np.where(streams[row].random((h, w)) < spec.salt_ratio,
                                    1.0, -1.0)
                    delta[row] = spec.strength * sign * mask
                out = clip01(out + delta[..., None])
    return clip01(out)


# ---------------------------------------------------------------------------
# preset manifests (key-value text format, the calibration output format)


def write_manifest(specs: Mapping[str, AugmentationSpec], path) -> None:
    """Write named specs as an INI-style key-value manifest."""
    cp = configparser.ConfigParser()
    for name in sorted(specs):
        spec = specs[name]
        cp[name] = {"kind": spec.kind.value}
        for key, val in spec.params().items():
            cp[name][key] = repr(int(val)) if key == "size" else repr(float(val))
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def _spec_from_items(items: Mapping[str, str]) -> AugmentationSpec:
    fields = dict(items)
    try:
        kind = AugKind(fields.pop("kind"))
    except (KeyError, ValueError) as exc:
        raise ParameterError(f"manifest entry has bad kind: {exc}") from exc
    kwargs = {}
    for key, val in fields.items():
        kwargs[key] = int(val) if key == "size" else float(val)
    return AugmentationSpec(kind=kind, **kwargs)


def load_manifest(path) -> dict[str, AugmentationSpec]:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ParameterError(f"augmentation manifest not found: {path}")
    return {name: _spec_from_items(cp[name]) for name in cp.sections()}


def load_presets() -> dict[str, AugmentationSpec]:
    """The calibrated strength presets shipped with the package,
    keyed like 'cifar10/brightness_plus'."""
    ref = importlib.resources.files("fmarobust") / "presets" / "table1.cfg"
    cp = configparser.ConfigParser()
    cp.read_string(ref.read_text(encoding="utf-8"))
    return {name: _spec_from_items(cp[name]) for name in cp.sections()}


def load_preset(name: str) -> AugmentationSpec:
    presets = load_presets()
    if name not in presets:
        raise ParameterError(f"unknown preset '{name}'; have {sorted(presets)}")
    return presets[name]


def default_combined_sets(presets: Mapping[str, AugmentationSpec],
                          prefix: str = "cifar10"):
    """Build (Combined+, Combined-) from a preset table."""
    by_kind = {}
    for name, spec in presets.items():
        if name.startswith(prefix + "/"):
            by_kind[spec.kind] = spec
    return combined_set(True, by_kind), combined_set(False, by_kind)
