"""conparc: iterative connectivity-based parcellation from the command line.

    python conparc.py parcellate --mask mask.txt --conn conn.txt --k 40 --init grid:5 --out run/
    python conparc.py compare a.parc b.parc
    python conparc.py synth --dims 20x20x10 --k 5 --seed 1 --out data/

Diagnostics go to standard error; data goes to files or standard output.
Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""
import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from config import configure_logging, default_seed, default_threads, get_setting
from data_model import (
    BINARY_MAGIC,
    FLOAT_FMT,
    NumericalError,
    ValidationError,
    as_generator,
    derive_seed,
    read_connectivity,
    read_connectivity_binary,
    read_mask,
    read_parcellation,
    read_segmentation,
    write_confidence,
    write_connectivity_binary,
    write_parcellation,
)
from group import (
    build_connectome,
    cross_validate,
    edge_features,
    edgewise_ttests,
    majority_atlas,
    read_connectome,
    relabel_group,
    select_top_edges,
    similarity_group_test,
    write_connectome,
    write_edgewise_report,
)
from metrics import METRICS, dice, mean_offdiagonal, nmi, pairwise_similarity, random_baseline, write_similarity
from pipeline import (
    PipelineParams,
    compare_initializations,
    iterate_parcellation,
    parse_init_mode,
    split_init_mode,
    write_trace,
)
from profiles import aggregate_profiles
from spatial_graph import MEASURES, build_spatial_edges, weight_edges, write_graph
from synth import SIGNATURES, SynthSpec, generate, write_instance

log = logging.getLogger("conparc")

# derive_seed key for the atlas reference draw
_ATLAS_REFERENCE_STREAM = 4


def _fmt(value):
    return FLOAT_FMT % value


def _load_connectivity(path, mask):
    with open(path, "rb") as fh:
        magic = fh.read(len(BINARY_MAGIC))
    if magic == BINARY_MAGIC:
        return read_connectivity_binary(path, mask)
    return read_connectivity(path, mask)


def _pipeline_params(args):
    return PipelineParams(
        k=args.k,
        radius=args.radius,
        measure=args.measure,
        restarts=args.restarts,
        stop_threshold=args.stop_threshold,
        max_iterations=args.max_iterations,
        seed=args.seed,
        early_stop=not args.no_early_stop,
        n_jobs=args.threads,
    )


def _parse_dims(text):
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError:
        raise ValidationError(f"dims must look like 20x20x10, got {text!r}")
    if len(dims) != 3:
        raise ValidationError(f"dims must have three sizes, got {text!r}")
    return dims


# --- 1. COMMANDS ---
def cmd_parcellate(args):
    params = _pipeline_params(args)
    split_init_mode(args.init)
    mask = read_mask(args.mask)
    conn = _load_connectivity(args.conn, mask)
    edges = build_spatial_edges(mask, params.radius)
    init = parse_init_mode(args.init, mask, params, edges)
    parc, trace = iterate_parcellation(conn, mask, init, params, edges)
    os.makedirs(args.out, exist_ok=True)
    write_parcellation(parc, mask, os.path.join(args.out, "parcellation.parc"))
    write_trace(trace, os.path.join(args.out, "trace.tsv"))
    log.info("wrote %s after %d iterations (converged=%s)", args.out, len(trace), trace.converged)


def cmd_compare(args):
    a = read_parcellation(args.parc_a)
    b = read_parcellation(args.parc_b)
    print(f"nmi={_fmt(nmi(a, b))} dice={_fmt(dice(a, b))}")


def cmd_atlas(args):
    mask = read_mask(args.mask) if args.mask else None
    parcs = [read_parcellation(p, mask) for p in args.parcs]
    if args.reference is None:
        reference = int(as_generator(derive_seed(args.seed, _ATLAS_REFERENCE_STREAM)).integers(len(parcs)))
    else:
        reference = args.reference
    log.info("atlas reference: %s", args.parcs[reference] if 0 <= reference < len(parcs) else reference)
    atlas = majority_atlas(relabel_group(parcs, reference))
    os.makedirs(args.out, exist_ok=True)
    write_parcellation(atlas.parcellation, mask, os.path.join(args.out, "atlas.parc"))
    write_confidence(atlas.confidence, os.path.join(args.out, "confidence.conf"))


def cmd_connectome(args):
    mask = read_mask(args.mask)
    conn = _load_connectivity(args.conn, mask)
    parc = read_parcellation(args.parc, mask)
    write_connectome(build_connectome(conn, parc), args.out)


def cmd_ttest(args):
    group_a = [read_parcellation(p) for p in args.group_a]
    group_b = [read_parcellation(p) for p in args.group_b]
    result = similarity_group_test(group_a, group_b, args.metric, equal_var=not args.welch)
    frame = result.to_frame()
    frame.to_csv(sys.stdout, sep="\t", index=False, float_format=FLOAT_FMT)
    if args.out:
        frame.to_csv(args.out, sep="\t", index=False, float_format=FLOAT_FMT)


def cmd_edgetest(args):
    group_a = [read_connectome(p) for p in args.group_a]
    group_b = [read_connectome(p) for p in args.group_b]
    result = edgewise_ttests(group_a, group_b, tuple(args.thresholds), equal_var=not args.welch)
    for threshold, significant in result.maps.items():
        count = int(np.triu(significant).sum())
        log.info("%d edges significant at p < %g", count, threshold)
    write_edgewise_report(result, args.out)


def cmd_classify(args):
    group_a = [read_connectome(p) for p in args.group_a]
    group_b = [read_connectome(p) for p in args.group_b]
    ranking = edgewise_ttests(group_a, group_b)
    edges = select_top_edges(ranking.p, args.edges)
    log.info("selected edges: %s", edges)
    features = edge_features(group_a + group_b, edges)
    labels = np.concatenate([np.ones(len(group_a)), -np.ones(len(group_b))])
    accuracy = cross_validate(features, labels, args.folds, seed=args.seed, n_jobs=args.threads)
    print(f"accuracy={_fmt(accuracy)}")


def cmd_synth(args):
    spec = SynthSpec(
        dims=_parse_dims(args.dims),
        k_true=args.k,
        within_strength=args.within,
        between_strength=args.between,
        noise=args.noise,
        density=args.density,
        signature=args.signature,
        seed=args.seed,
    )
    instance = generate(spec, n_jobs=args.threads)
    paths = write_instance(instance, args.out)
    if args.binary:
        write_connectivity_binary(instance.conn, os.path.join(args.out, "conn.bin"))
    log.info("wrote %s", ", ".join(sorted(paths.values())))


def cmd_graph_dump(args):
    mask = read_mask(args.mask)
    conn = _load_connectivity(args.conn, mask)
    seg = read_segmentation(args.seg, mask)
    edges = build_spatial_edges(mask, args.radius)
    graph = weight_edges(edges, aggregate_profiles(conn, seg), args.measure)
    write_graph(graph, args.out)


def cmd_similarity(args):
    parcs = [read_parcellation(p) for p in args.parcs]
    matrix = pairwise_similarity(parcs, args.metric)
    if args.out:
        write_similarity(matrix, args.parcs, args.out)
    else:
        pd.DataFrame(matrix, index=args.parcs, columns=args.parcs).to_csv(
            sys.stdout, sep="\t", float_format=FLOAT_FMT
        )
    print(f"mean={_fmt(mean_offdiagonal(matrix))}")
    if args.random_baseline:
        baseline = random_baseline(parcs, trials=args.random_baseline, metric=args.metric, seed=args.seed)
        print(f"random={_fmt(baseline)}")


def cmd_stability(args):
    if len(args.init) < 2:
        raise ValidationError("stability needs at least two --init modes")
    params = _pipeline_params(args)
    for mode in args.init:
        split_init_mode(mode)
    mask = read_mask(args.mask)
    conn = _load_connectivity(args.conn, mask)
    edges = build_spatial_edges(mask, params.radius)
    inits = {mode: parse_init_mode(mode, mask, params, edges) for mode in args.init}
    _, pairs, curve = compare_initializations(conn, mask, inits, params)
    os.makedirs(args.out, exist_ok=True)
    pairs.to_csv(os.path.join(args.out, "pairs.tsv"), sep="\t", index=False, float_format=FLOAT_FMT)
    curve.to_csv(os.path.join(args.out, "curve.tsv"), sep="\t", index=False, float_format=FLOAT_FMT)


# --- 2. ARGUMENTS ---
def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default_seed(), help="master random seed")
    common.add_argument("--threads", type=int, default=default_threads(), help="worker threads")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    return common


def _pipeline_parser():
    pipe = argparse.ArgumentParser(add_help=False)
    pipe.add_argument("--mask", required=True)
    pipe.add_argument("--conn", required=True, help="text or binary connectivity file")
    pipe.add_argument("--k", type=int, required=True, help="number of regions")
    pipe.add_argument("--radius", type=int, default=get_setting("RADIUS", cast=int))
    pipe.add_argument("--measure", choices=MEASURES, default="correlation")
    pipe.add_argument("--restarts", type=int, default=get_setting("RESTARTS", cast=int))
    pipe.add_argument("--stop-threshold", type=float, default=get_setting("STOP_THRESHOLD", cast=float))
    pipe.add_argument("--max-iterations", type=int, default=get_setting("MAX_ITERATIONS", cast=int))
    pipe.add_argument("--no-early-stop", action="store_true", help="always run max-iterations")
    pipe.add_argument("--out", required=True, help="output directory")
    return pipe


def build_parser():
    common = _common_parser()
    pipe = _pipeline_parser()
    parser = argparse.ArgumentParser(prog="conparc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parcellate", parents=[common, pipe], help="iterative parcellation")
    p.add_argument("--init", required=True, help="file:<path>, random:<m>, grid:<cube> or synthetic")
    p.set_defaults(func=cmd_parcellate)

    p = sub.add_parser("stability", parents=[common, pipe], help="compare runs from several initializations")
    p.add_argument("--init", action="append", default=[], help="repeat for each initialization")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("compare", parents=[common], help="NMI and Dice between two parcellations")
    p.add_argument("parc_a")
    p.add_argument("parc_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("atlas", parents=[common], help="majority-vote atlas and confidence map")
    p.add_argument("parcs", nargs="+")
    p.add_argument("--reference", type=int, default=None, help="0-based index; drawn from --seed if omitted")
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_atlas)

    p = sub.add_parser("connectome", parents=[common], help="region-level connectome")
    p.add_argument("--mask", required=True)
    p.add_argument("--conn", required=True)
    p.add_argument("--parc", required=True)
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_connectome)

    p = sub.add_parser("ttest", parents=[common], help="group similarity t-tests")
    p.add_argument("--groupA", dest="group_a", nargs="+", required=True)
    p.add_argument("--groupB", dest="group_b", nargs="+", required=True)
    p.add_argument("--metric", choices=sorted(METRICS), default="nmi")
    p.add_argument("--welch", action="store_true", help="unequal variances")
    p.add_argument("--out", default=None, help="also write the table here")
    p.set_defaults(func=cmd_ttest)

    p = sub.add_parser("edgetest", parents=[common], help="edge-wise connectome t-tests")
    p.add_argument("--groupA", dest="group_a", nargs="+", required=True)
    p.add_argument("--groupB", dest="group_b", nargs="+", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.05, 0.00005])
    p.add_argument("--welch", action="store_true", help="unequal variances")
    p.add_argument("--out", required=True, help="report file")
    p.set_defaults(func=cmd_edgetest)

    p = sub.add_parser("classify", parents=[common], help="cross-validated connectome classification")
    p.add_argument("--groupA", dest="group_a", nargs="+", required=True)
    p.add_argument("--groupB", dest="group_b", nargs="+", required=True)
    p.add_argument("--edges", type=int, default=3, help="number of top-ranked edges")
    p.add_argument("--folds", type=int, default=10)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("synth", parents=[common], help="synthetic instance with planted regions")
    p.add_argument("--dims", default="20x20x10")
    p.add_argument("--k", type=int, default=5, help="planted region count")
    p.add_argument("--within", type=float, default=1.0)
    p.add_argument("--between", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--signature", choices=SIGNATURES, default="ring", help="region-to-target link pattern")
    p.add_argument("--binary", action="store_true", help="also write conn.bin")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("similarity", parents=[common], help="pairwise similarity within a group")
    p.add_argument("parcs", nargs="+")
    p.add_argument("--metric", choices=sorted(METRICS), default="nmi")
    p.add_argument("--random-baseline", type=int, default=0, metavar="TRIALS")
    p.add_argument("--out", default=None, help="matrix file; printed to stdout if omitted")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("graph-dump", parents=[common], help="write the weighted similarity graph")
    p.add_argument("--mask", required=True)
    p.add_argument("--conn", required=True)
    p.add_argument("--seg", required=True, help="segmentation file")
    p.add_argument("--radius", type=int, default=get_setting("RADIUS", cast=int))
    p.add_argument("--measure", choices=MEASURES, default="correlation")
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_graph_dump)
    return parser


# --- 3. ENTRY POINT ---
def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
        if args.threads == 0:
            raise ValidationError("threads must be nonzero")
        args.func(args)
    except (ValidationError, FileNotFoundError, IsADirectoryError) as err:
        if isinstance(err, OSError):
            message = f"{err.strerror}: {err.filename}"
        else:
            message = str(err)
        print(f"conparc: error: {message}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"conparc: numerical failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
