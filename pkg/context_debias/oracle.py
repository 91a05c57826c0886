"""Ground-truth scene edits used by the grammar oracle backend."""

from __future__ import annotations

import dataclasses

from context_debias.errors import PreconditionError, ProvenanceError
from context_debias.glyphs import Pose
from context_debias.scenegen import ImageSample, SceneSpec, render_scene
from context_debias.schema import CategorySchema


def grammar_oracle_edit(
    sample: ImageSample,
    mode: str,
    replacement: str | None = None,
    *,
    schema: CategorySchema,
    context: str | None = None,
) -> ImageSample:
    """Re-render the source scene without ``context`` or with ``replacement`` in its place.

    ``context`` defaults to the scene's context object; passing the background category swaps
    the background (single-object scenes).
    """
    spec = sample.scene
    if spec is None:
        raise ProvenanceError(f"Sample has no stored scene id={sample.id}")
    if mode not in {"removal", "replacement"}:
        raise PreconditionError(f"Unknown edit mode={mode}")
    if (mode == "replacement") != (replacement is not None):
        raise PreconditionError("replacement is required iff mode=replacement")
    schema.require(replacement)
    target = context or spec.context_object
    if target is None:
        raise PreconditionError(f"Scene has no context to edit id={sample.id}")

    if target == spec.background:
        if replacement is None or replacement not in schema.background_classes:
            raise PreconditionError("Background edits must replace it with another background")
        new_spec = dataclasses.replace(spec, background=replacement)
        group = (spec.biased_object, replacement)
    elif target in {spec.context_object, spec.secondary_context}:
        new_spec = _edit_foreground(spec, target, replacement)
        group = (new_spec.biased_object, new_spec.context_object)
    else:
        raise PreconditionError(f"Context not present in scene id={sample.id} context={target}")

    edited = render_scene(new_spec, schema)
    suffix = f"{mode}-{replacement}" if replacement else mode
    return dataclasses.replace(edited, id=f"{sample.id}-{suffix}", split=sample.split, group=group)


def _edit_foreground(spec: SceneSpec, target: str, replacement: str | None) -> SceneSpec:
    ground = float(spec.image_size) - 1.0
    poses: list[tuple[str, Pose]] = []
    for name, pose in spec.object_poses:
        if name == target:
            if replacement is not None:
                poses.append((replacement, pose))
            continue
        if replacement is not None and name == replacement:
            # The replacement already shows up elsewhere; keep a single instance.
            continue
        poses.append((name, pose))

    if replacement is None and target == spec.context_object and spec.biased_object is not None:
        # Nothing holds the object any more: let it rest on the support line.
        poses = [
            (name, dataclasses.replace(pose, y=ground - pose.radius) if name == spec.biased_object else pose)
            for name, pose in poses
        ]

    context_object = spec.context_object
    secondary = spec.secondary_context
    if target == spec.context_object:
        context_object = replacement
        if replacement is not None and replacement == secondary:
            secondary = None
    else:
        secondary = replacement
        if replacement is not None and replacement == context_object:
            secondary = None
    return dataclasses.replace(
        spec, context_object=context_object, secondary_context=secondary, object_poses=tuple(poses)
    )
