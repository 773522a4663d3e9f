"""Deterministic augmentation plans and their rendering.

A recipe names a list of effect variants; a plan binds every (utterance,
variant) pair to a concrete factor drawn by a stable hash of
(base_seed, utterance_id, variant_index, range). Rendering materializes one
WAV per entry and returns an expanded manifest whose augmented records
inherit all metadata from their source.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .audio import EffectSpec, apply_effect, read_wav, write_wav
from .corpus import CorpusManifest
from .errors import BadRange, CrossEmoError, UnknownRecipe
from .ioutil import read_json, stable_hash64, write_json

DEFAULT_FACTOR_RANGE = (0.6, 1.5)

# variant lists per recipe; "7vars" covers all six effects plus a second
# independent speed draw
RECIPE_VARIANTS = {
    "speed": ("speed",),
    "volume": ("volume",),
    "2sp-2vol": ("speed", "speed", "volume", "volume"),
    "7vars": ("speed", "volume", "tempo", "bass", "treble", "overdrive", "speed"),
}


@dataclass(frozen=True)
class VariantTemplate:
    kind: str
    lo: float
    hi: float


@dataclass(frozen=True)
class AugmentRecipe:
    name: str
    variants: tuple

    @property
    def expansion(self) -> int:
        """Total data multiple: originals plus one copy per variant."""
        return 1 + len(self.variants)


def get_recipe(name: str, factor_range=DEFAULT_FACTOR_RANGE) -> AugmentRecipe:
    if name not in RECIPE_VARIANTS:
        raise UnknownRecipe(
            f"unknown recipe {name!r}; valid recipes: {', '.join(sorted(RECIPE_VARIANTS))}"
        )
    lo, hi = float(factor_range[0]), float(factor_range[1])
    if not lo < hi:
        raise BadRange(f"factor range must satisfy lo < hi, got [{lo}, {hi}]")
    variants = tuple(VariantTemplate(kind, lo, hi) for kind in RECIPE_VARIANTS[name])
    return AugmentRecipe(name=name, variants=variants)


def draw_factor(base_seed: int, utterance_id: str, variant_index: int, factor_range) -> float:
    """Uniform draw in [lo, hi], a pure function of all four inputs."""
    lo, hi = float(factor_range[0]), float(factor_range[1])
    if not lo < hi:
        raise BadRange(f"factor range must satisfy lo < hi, got [{lo}, {hi}]")
    u = stable_hash64(base_seed, utterance_id, variant_index, repr(lo), repr(hi)) / 2.0**64
    return lo + u * (hi - lo)


@dataclass(frozen=True)
class PlanEntry:
    source_id: str
    variant_index: int
    effect: EffectSpec
    output_path: str


@dataclass(frozen=True)
class AugmentPlan:
    recipe: str
    base_seed: int
    out_dir: str
    entries: tuple

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "recipe": self.recipe,
            "base_seed": self.base_seed,
            "out_dir": self.out_dir,
            "entries": [
                {
                    "source_id": e.source_id,
                    "variant_index": e.variant_index,
                    "effect": e.effect.kind,
                    "factor": e.effect.factor,
                    "output_path": e.output_path,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentPlan":
        entries = tuple(
            PlanEntry(
                source_id=e["source_id"],
                variant_index=int(e["variant_index"]),
                effect=EffectSpec(e["effect"], float(e["factor"])),
                output_path=e["output_path"],
            )
            for e in obj["entries"]
        )
        return cls(
            recipe=obj["recipe"],
            base_seed=int(obj["base_seed"]),
            out_dir=obj["out_dir"],
            entries=entries,
        )


def save_plan(plan: AugmentPlan, path: str | Path) -> None:
    write_json(path, plan.to_json())


def load_plan(path: str | Path) -> AugmentPlan:
    return AugmentPlan.from_json(read_json(path))


def augmented_id(source_id: str, recipe: str, variant_index: int) -> str:
    return f"{source_id}__{recipe}__v{variant_index}"


def plan_augmentation(
    manifest: CorpusManifest,
    recipe: AugmentRecipe | str,
    base_seed: int,
    out_dir: str | Path,
) -> AugmentPlan:
    """One entry per (record, variant); |entries| = |records| * |variants|."""
    if isinstance(recipe, str):
        recipe = get_recipe(recipe)
    out_dir = str(out_dir)
    entries = []
    for record in manifest.records:
        for k, template in enumerate(recipe.variants):
            factor = draw_factor(base_seed, record.id, k, (template.lo, template.hi))
            name = augmented_id(record.id, recipe.name, k)
            entries.append(
                PlanEntry(
                    source_id=record.id,
                    variant_index=k,
                    effect=EffectSpec(template.kind, factor),
                    output_path=str(Path(out_dir) / f"{name}.wav"),
                )
            )
    return AugmentPlan(
        recipe=recipe.name, base_seed=base_seed, out_dir=out_dir, entries=tuple(entries)
    )


@dataclass(frozen=True)
class RenderOutcome:
    output_id: str
    status: str  # "ok" or an error message
    duration_s: float | None


def apply_plan(plan: AugmentPlan, manifest: CorpusManifest):
    """Render every entry; failures are collected per entry, not fatal.

    Returns (expanded manifest, outcomes). The expanded manifest holds the
    originals plus one augmented record per successful entry, inheriting
    speaker/session/style/emotion from the source and flagged augmented.
    """
    outcomes = []
    new_records = list(manifest.records)
    for entry in plan.entries:
        out_id = augmented_id(entry.source_id, plan.recipe, entry.variant_index)
        try:
            source = manifest.get(entry.source_id)
        except KeyError:
            outcomes.append(RenderOutcome(out_id, "unknown source id", None))
            continue
        try:
            buffer = read_wav(source.audio_path)
            rendered = apply_effect(buffer, entry.effect)
            write_wav(rendered, entry.output_path)
        except CrossEmoError as exc:
            outcomes.append(RenderOutcome(out_id, f"{type(exc).__name__}: {exc}", None))
            continue
        new_records.append(
            replace(
                source,
                id=out_id,
                audio_path=entry.output_path,
                augmented=True,
                source_id=source.id,
            )
        )
        outcomes.append(RenderOutcome(out_id, "ok", rendered.duration))
    return CorpusManifest(manifest.name, tuple(new_records)), outcomes


def outcomes_to_csv(outcomes) -> str:
    lines = ["output_id,status,duration_s"]
    for o in outcomes:
        dur = "" if o.duration_s is None else f"{o.duration_s:.6f}"
        status = o.status.replace(",", ";")
        lines.append(f"{o.output_id},{status},{dur}")
    return "\n".join(lines) + "\n"
