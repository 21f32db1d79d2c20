"""Command-line surface tying the pipeline together.

Subcommands: train, project, rank, traits, visualize, explain,
percept-study, report. Every subcommand reads an optional RunConfig
(--config), writes JSON/PNG/binary artifacts into the output directory
(--out, else $ASXAI_OUT, else ./outputs), and exits 0 on success. On
failure a machine-readable error record goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import plots
from .config import RunConfig, load_config, read_json, write_json
from .explain import (
    build_report,
    distributions_from_dict,
    distributions_to_dict,
    fit_class_concept_distributions,
    load_templates,
)
from .inversion import InversionConfig, invert_features, salient_region_mask
from .model import ProtoConceptNet, load_checkpoint, save_checkpoint
from .ranks import (
    ConceptAssignment,
    assign_concepts,
    find_redundant_filters,
    pcs_weights,
    rank_profile,
)
from .percept import PerturbSpec, run_percept_study, render_boxplots, write_report_json
from .traits import (
    RowCenteredPCA,
    collect_concept_features,
    principal_components,
    qq_normality_r2,
    row_center,
    sample_covariance,
    write_trait_space,
)
from .training import project_basis_vectors, train


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ASXAI_OUT") or "outputs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    else:
        cfg.train.seed = cfg.seed
    return cfg


def _load_data(args, cfg: RunConfig):
    root = args.data or cfg.paths.data
    if not root:
        raise ValueError("no dataset given: pass --data or set paths.data in the config")
    manifest = data_mod.ingest_dataset(root)
    return manifest, data_mod.load_dataset(
        manifest, augment_data=cfg.augment, augment_copies=cfg.augment_copies, seed=cfg.seed
    )


def _load_image(path) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as img:
        raw = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return data_mod.preprocess(data_mod.resize_only(raw)[None])[0]


def _assignment_for(model, dataset, cfg: RunConfig, out: Path, seed: int) -> ConceptAssignment:
    """Load concept_assignment.json if present, else cluster and save it."""
    path = out / "concept_assignment.json"
    if path.exists():
        return ConceptAssignment.from_dict(read_json(path))
    redundant = find_redundant_filters(model, dataset.images[: min(len(dataset), 64)])
    names = {int(k): v for k, v in cfg.analysis.concept_names.items()}
    assignment = assign_concepts(
        model.basis,
        cfg.analysis.cluster_count,
        seed=seed,
        names=names,
        redundant_filters=redundant,
    )
    payload = assignment.to_dict()
    payload["config_hash"] = cfg.content_hash()
    write_json(path, payload)
    return assignment


def _distributions_for(model, dataset, assignment, cfg: RunConfig, out: Path) -> dict:
    path = out / "concept_distributions.json"
    if path.exists():
        return distributions_from_dict(read_json(path))
    dists = fit_class_concept_distributions(
        model,
        dataset,
        assignment,
        mask_percentile=cfg.analysis.mask_percentile,
        mode=cfg.analysis.activation_mode,
    )
    payload = distributions_to_dict(dists)
    payload["config_hash"] = cfg.content_hash()
    write_json(path, payload)
    return dists


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    manifest, dataset = _load_data(args, cfg)
    torch.manual_seed(cfg.seed)
    model = ProtoConceptNet(
        num_classes=dataset.num_classes,
        per_class=cfg.train.vectors_per_class,
        feature_channels=cfg.model.feature_channels,
        backbone=cfg.model.backbone,
        backbone_channels=cfg.model.backbone_channels,
        class_names=dataset.class_names,
    )
    model, log = train(model, dataset, cfg.train)
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, model, config_hash=cfg.content_hash(), stage_log=log.records)
    log.write_jsonl(out / "training_log.jsonl")
    write_json(out / "manifest.json", manifest.to_dict())
    resolved = cfg.to_dict()
    resolved["config_hash"] = cfg.content_hash()
    write_json(out / "resolved_config.json", resolved)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_project(args) -> int:
    cfg = _run_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    _, dataset = _load_data(args, cfg)
    project_basis_vectors(model, dataset)
    save_checkpoint(
        args.checkpoint, model,
        config_hash=meta.get("config_hash", cfg.content_hash()),
        stage_log=meta.get("stage_log", []),
    )
    print(f"projected {model.num_classes * model.per_class} basis vectors")
    return 0


def cmd_rank(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    _, dataset = _load_data(args, cfg)
    if args.clusters:
        cfg.analysis.cluster_count = args.clusters
    if args.names:
        cfg.analysis.concept_names = read_json(args.names)
    assignment = _assignment_for(model, dataset, cfg, out, cfg.seed)
    for i in range(min(args.profiles, len(dataset))):
        profile = rank_profile(
            model, dataset.images[i], assignment, image_id=dataset.image_ids[i]
        )
        payload = profile.to_dict()
        payload["config_hash"] = cfg.content_hash()
        write_json(out / f"rank_profile_{i:04d}.json", payload)
    print(f"concept assignment + {min(args.profiles, len(dataset))} rank profiles in {out}")
    return 0


def cmd_traits(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    _, dataset = _load_data(args, cfg)
    assignment = _assignment_for(model, dataset, cfg, out, cfg.seed)
    _distributions_for(model, dataset, assignment, cfg, out)

    wanted = [args.concept] if args.concept else [
        assignment.concept_name(c) for c in assignment.concept_ids()
    ]
    classes = [args.class_name] if args.class_name else dataset.class_names
    made = 0
    for class_name in classes:
        class_idx = dataset.class_names.index(class_name)
        subset = dataset.subset(dataset.indices_of_class(class_idx))
        for concept in wanted:
            try:
                W, ids = collect_concept_features(
                    subset, model, assignment, concept,
                    n_samples=args.samples or cfg.analysis.trait_samples,
                    seed=cfg.seed,
                    mode=cfg.analysis.activation_mode,
                    mask_percentile=cfg.analysis.mask_percentile,
                )
            except ValueError as err:
                print(f"skipping {class_name}/{concept}: {err}", file=sys.stderr)
                continue
            W_hat, _ = row_center(W)
            P = sample_covariance(W_hat)
            k = args.components or cfg.analysis.trait_components
            if k is None:
                k = RowCenteredPCA(info_target=0.9).fit(W).components_.shape[1]
            space = principal_components(W, P, k)
            extra = {
                "class": class_name,
                "concept": concept,
                "sample_ids": ids,
                "qq_r2_pc1": qq_normality_r2(space.scores[:, 0]),
                "config_hash": cfg.content_hash(),
            }
            write_trait_space(out / f"traits_{class_name}_{concept}", space, extra)
            made += 1
    print(f"{made} trait spaces written to {out}")
    return 0


def cmd_visualize(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    _, dataset = _load_data(args, cfg)
    assignment = _assignment_for(model, dataset, cfg, out, cfg.seed)
    inv_cfg = InversionConfig(
        tv_weight=cfg.inversion.tv_weight,
        step_size=cfg.inversion.step_size,
        iterations=args.iterations or cfg.inversion.iterations,
        log_every=cfg.inversion.log_every,
    )

    wanted = [args.concept] if args.concept else [
        assignment.concept_name(c) for c in assignment.concept_ids()
    ]
    classes = [args.class_name] if args.class_name else dataset.class_names
    log_path = out / "inversion_log.jsonl"
    made = 0
    with open(log_path, "w") as log_fh:
        for class_name in classes:
            class_idx = dataset.class_names.index(class_name)
            subset = dataset.subset(dataset.indices_of_class(class_idx))
            for concept in wanted:
                try:
                    W, _ = collect_concept_features(
                        subset, model, assignment, concept,
                        n_samples=min(len(subset), cfg.analysis.trait_samples),
                        seed=cfg.seed,
                        mode=cfg.analysis.activation_mode,
                        mask_percentile=cfg.analysis.mask_percentile,
                    )
                except ValueError as err:
                    print(f"skipping {class_name}/{concept}: {err}", file=sys.stderr)
                    continue
                W_hat, _ = row_center(W)
                space = principal_components(W, sample_covariance(W_hat), 1)
                members = assignment.members(
                    next(c for c in assignment.concept_ids()
                         if assignment.concept_name(c) == concept)
                )
                target = torch.from_numpy(
                    space.first_component().astype(np.float32)
                )

                def feature_fn(z, members=members):
                    sims = model.similarity_maps(model.extract_features(z[None]))[0]
                    return sims[members].reshape(-1)

                image, inv_log = invert_features(
                    target, feature_fn, inv_cfg, image_shape=(3, 224, 224)
                )
                for record in inv_log:
                    record.update({"class": class_name, "concept": concept})
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                plots.render_image(
                    out / f"pc1_{class_name}_{concept}.png",
                    plots.deprocess_image(image.numpy()),
                    title=f"{class_name}: {concept} (1st PC)",
                )
                made += 1
    if args.image:
        image = _load_image(args.image)
        with torch.no_grad():
            sims = model.similarity_maps(model.extract_features(image[None]))[0]
        best = int(sims.amax(dim=(1, 2)).argmax())
        mask = salient_region_mask(sims[best].numpy(), cfg.analysis.salient_percentile)
        raw = np.clip(
            (image.numpy().transpose(1, 2, 0) * data_mod.NORM_STD + data_mod.NORM_MEAN), 0, 1
        )
        plots.render_salient_overlay(
            out / f"salient_{Path(args.image).stem}.png", raw, mask,
            title=f"salient region (filter {best})",
        )
    print(f"{made} inversions written to {out}")
    return 0


def cmd_explain(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    model, meta = load_checkpoint(args.checkpoint)
    artifacts = Path(args.artifacts) if args.artifacts else out

    assignment_path = artifacts / "concept_assignment.json"
    dists_path = artifacts / "concept_distributions.json"
    if assignment_path.exists() and dists_path.exists():
        assignment = ConceptAssignment.from_dict(read_json(assignment_path))
        distributions = distributions_from_dict(read_json(dists_path))
    else:
        _, dataset = _load_data(args, cfg)
        assignment = _assignment_for(model, dataset, cfg, artifacts, cfg.seed)
        distributions = _distributions_for(model, dataset, assignment, cfg, artifacts)

    image = _load_image(args.image)
    profile = rank_profile(model, image, assignment, image_id=str(args.image))
    weights = pcs_weights(profile.scores)
    report = build_report(
        model,
        image,
        assignment,
        distributions,
        weights,
        image_id=str(args.image),
        mask_percentile=cfg.analysis.mask_percentile,
        mode=cfg.analysis.activation_mode,
        templates=load_templates(args.templates) if args.templates else None,
        config_hash=meta.get("config_hash", cfg.content_hash()),
    )
    stem = Path(args.image).stem
    report.write_json(out / f"explanation_{stem}.json")
    plots.render_bubble_ring(out / f"bubble_ring_{stem}.png", report.pcs_by_class)
    plots.render_similarity_hist(out / f"similarity_hist_{stem}.png", report.global_similarity)
    print(report.text)
    return 0


def cmd_percept_study(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    model, meta = load_checkpoint(args.checkpoint)
    _, dataset = _load_data(args, cfg)
    assignment = _assignment_for(model, dataset, cfg, out, cfg.seed)

    concept_members = {}
    for concept_id in assignment.concept_ids():
        name = assignment.concept_name(concept_id)
        concept_members[name] = [
            divmod(f, model.per_class) for f in assignment.members(concept_id)
        ]
    domains = args.domains.split(",") if args.domains else cfg.percept.domains
    report, deltas = run_percept_study(
        model,
        dataset,
        concept_members,
        spec=cfg.percept.spec,
        domains=domains,
        samples_per_category=args.samples or cfg.percept.samples_per_category,
        seed=cfg.seed,
    )
    write_report_json(out / "sensitivity_report.json", report,
                      config_hash=meta.get("config_hash", cfg.content_hash()))
    render_boxplots(out / "sensitivity_boxplots.png", deltas)
    print(f"sensitivity report in {out}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    artifacts = Path(args.artifacts) if args.artifacts else out
    hashes: dict[str, str] = {}
    for path in sorted(artifacts.rglob("*.json")):
        try:
            payload = read_json(path)
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(payload, dict) and "config_hash" in payload:
            hashes[str(path.relative_to(artifacts))] = payload["config_hash"]
    distinct = sorted(set(hashes.values()))
    summary = {
        "schema": "provenance-report/1",
        "artifact_count": len(hashes),
        "hashes": hashes,
        "distinct_hashes": distinct,
        "consistent": len(distinct) <= 1,
    }
    write_json(out / "report.json", summary)
    if summary["consistent"]:
        print(f"{len(hashes)} artifacts, provenance consistent")
        return 0
    print(f"mixed provenance detected: {distinct}", file=sys.stderr)
    return 1 if args.strict else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semaxes",
        description="Train a prototype-concept CNN and explain its decisions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=False):
        p.add_argument("--config", help="RunConfig file (.toml or .json)")
        p.add_argument("--out", help="output directory (default $ASXAI_OUT or ./outputs)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", help="folder-per-class dataset root")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")

    p = sub.add_parser("train", help="run the three-stage training schedule")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("project", help="re-project basis vectors onto patch features")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("rank", help="concept assignment and rank profiles")
    common(p, checkpoint=True)
    p.add_argument("--clusters", type=int, help="number of concept clusters")
    p.add_argument("--names", help="JSON file mapping cluster id to concept name")
    p.add_argument("--profiles", type=int, default=5, help="rank profiles to write")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("traits", help="row-centered PCA trait spaces per concept")
    common(p, checkpoint=True)
    p.add_argument("--concept", help="restrict to one concept")
    p.add_argument("--class", dest="class_name", help="restrict to one class")
    p.add_argument("--samples", type=int, help="samples per trait space")
    p.add_argument("--components", type=int, help="components to retain")
    p.set_defaults(func=cmd_traits)

    p = sub.add_parser("visualize", help="invert 1st-PC traits to images")
    common(p, checkpoint=True)
    p.add_argument("--concept", help="restrict to one concept")
    p.add_argument("--class", dest="class_name", help="restrict to one class")
    p.add_argument("--iterations", type=int, help="override inversion iterations")
    p.add_argument("--image", help="also render a salient-region overlay for this image")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("explain", help="explanation report for one image")
    common(p, checkpoint=True)
    p.add_argument("--image", required=True, help="query image path")
    p.add_argument("--artifacts", help="directory holding assignment/distribution artifacts")
    p.add_argument("--templates", help="override sentence templates JSON")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("percept-study", help="perceptual-domain sensitivity study")
    common(p, checkpoint=True)
    p.add_argument("--domains", help="comma-separated subset of domains")
    p.add_argument("--samples", type=int, help="samples per category")
    p.set_defaults(func=cmd_percept_study)

    p = sub.add_parser("report", help="aggregate artifacts and verify provenance")
    common(p, data=False)
    p.add_argument("--artifacts", help="directory to scan (default: output dir)")
    p.add_argument("--strict", action="store_true", help="exit 1 on mixed provenance")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # surface a machine-readable error record
        record = {"error": type(err).__name__, "message": str(err)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
