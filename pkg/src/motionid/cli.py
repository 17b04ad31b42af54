"""motionid command line: ingest, synth, train, enroll, remove-user, identify, evaluate, delta.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .encoder import load_model, save_model
from .errors import ConfigError, DataError, MotionIDError, NotFoundError
from .evaluation import EvalProtocol, accuracy_grid, grid_delta, read_grid_csv
from .identify import DEFAULT_K, identify_sequence, identify_sequence_classifier
from .index import ReferenceIndex
from .motion_data import load_column_mapping, read_recording, validate_sequence
from .preprocessing import FeatureSequence, encode_bra, window_array, window_offsets, write_features
from .synth import SynthSpec, write_dataset
from .training import fit, load_train_config, parse_kv, train_config_from_kv

log = logging.getLogger("motionid")


@dataclass
class Manifest:
    """Flat key=value dataset description.

    Keys: ``root``, ``fps``, ``column_map``, ``recording.<user>.<session>``
    and ``split.train`` / ``split.validation`` / ``split.test`` (comma lists).
    Relative paths resolve against ``root``, which defaults to the manifest's
    directory.
    """

    root: Path
    fps: float = 90.0
    column_map: Path | None = None
    recordings: dict[str, dict[str, Path]] = field(default_factory=dict)
    splits: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"manifest {path} does not exist")
        items = parse_kv(path.read_text(encoding="utf-8"), str(path))
        root = Path(items.pop("root", str(path.parent)))
        if not root.is_absolute():
            root = path.parent / root
        manifest = cls(root)
        for key, value in items.items():
            if key == "fps":
                manifest.fps = float(value)
            elif key == "column_map":
                manifest.column_map = manifest.resolve(value)
            elif key.startswith("recording."):
                parts = key.split(".")
                if len(parts) != 3:
                    raise ConfigError(f"manifest key {key!r} must be recording.<user>.<session>")
                manifest.recordings.setdefault(parts[1], {})[parts[2]] = manifest.resolve(value)
            elif key in ("split.train", "split.validation", "split.test"):
                manifest.splits[key[6:]] = [u.strip() for u in value.split(",") if u.strip()]
            else:
                raise ConfigError(f"unknown manifest key {key!r}")
        seen: dict[str, str] = {}
        for split, users in manifest.splits.items():
            for u in users:
                if u in seen:
                    raise ConfigError(f"user {u} appears in splits {seen[u]} and {split}")
                seen[u] = split
        return manifest

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def column_mapping(self):
        return load_column_mapping(self.column_map) if self.column_map else None

    def users(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.recordings)
        return list(self.splits.get(split, []))

    def features(self, user: str, target_fps: float = 15.0) -> list[FeatureSequence]:
        """BRA sequences of every session of ``user``, in session-id order."""
        if user not in self.recordings:
            raise NotFoundError(f"user {user} has no recordings in the manifest")
        out = []
        for session in sorted(self.recordings[user]):
            path = self.recordings[user][session]
            if not path.is_file():
                raise NotFoundError(f"recording {path} listed in the manifest does not exist")
            raw = read_recording(path, user, session, self.fps, self.column_mapping())
            out.append(encode_bra(raw, target_fps))
        return out


def _two_sessions(manifest: Manifest, users: Sequence[str], target_fps: float
                  ) -> dict[str, tuple[FeatureSequence, FeatureSequence]]:
    data = {}
    for u in users:
        seqs = manifest.features(u, target_fps)
        if len(seqs) < 2:
            raise DataError(f"user {u} needs two sessions (enrollment and use-time), found {len(seqs)}")
        data[u] = (seqs[0], seqs[1])
    return data


# ----------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    manifest = Manifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, listing, failures = [], [f"fps={args.target_fps!r}"], 0
    mapping = manifest.column_mapping()
    for user in manifest.users():
        for session in sorted(manifest.recordings[user]):
            path = manifest.recordings[user][session]
            try:
                if not path.is_file():
                    raise NotFoundError(f"recording {path} does not exist")
                raw = read_recording(path, user, session, manifest.fps, mapping)
                findings = validate_sequence(raw)
                seq = encode_bra(raw, args.target_fps)
            except MotionIDError as exc:
                failures += 1
                report.append(f"{user}/{session}: ERROR {path}: {exc}")
                continue
            name = f"{user}_{session}.bra.csv"
            write_features(seq, out / name)
            listing.append(f"features.{user}.{session}={name}")
            status = "ok" if not findings else f"{len(findings)} findings"
            report.append(f"{user}/{session}: {status} frames={len(raw)} bra_rows={len(seq)}")
            report += [f"  {line}" for line in findings.format().splitlines()] if findings else []
    (out / "report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    (out / "features.txt").write_text("\n".join(listing) + "\n", encoding="utf-8")
    print("\n".join(report))
    if failures:
        print(f"{failures} recording(s) failed", file=sys.stderr)
        return 2
    return 0


def cmd_synth(args) -> int:
    items = parse_kv(Path(args.spec).read_text(encoding="utf-8"), args.spec) if args.spec else {}
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        items[key.strip()] = value.strip()
    if args.seed is not None:
        items["seed"] = str(args.seed)
    spec = SynthSpec.from_kv(items)
    manifest = write_dataset(spec, args.out)
    print(f"wrote {spec.users} users x 2 sessions; manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    items = parse_kv(Path(args.config).read_text(encoding="utf-8"), args.config)
    if args.seed is not None:
        items["seed"] = str(args.seed)
    config, extra = train_config_from_kv(items)
    if "manifest" not in extra or "out" not in extra:
        raise ConfigError("training config needs 'manifest' and 'out' keys")
    cfg_dir = Path(args.config).parent
    manifest = Manifest.load(cfg_dir / extra["manifest"])
    train_users = list(config.train_users) or manifest.users("train")
    val_users = list(config.val_users) or manifest.users("validation")
    if not train_users:
        raise ConfigError("no training users: set train_users or split.train")
    train_data = {u: manifest.features(u, config.target_fps) for u in train_users}
    val_data = _two_sessions(manifest, val_users, config.target_fps)
    out = cfg_dir / extra["out"]
    history_path = cfg_dir / extra.get("history", extra["out"] + ".history.csv")
    result = fit(train_data, val_data, config, checkpoint=str(out) + ".ckpt")
    save_model(result.model, out)
    history_path.write_text(result.history_csv(), encoding="utf-8")
    print(f"best epoch {result.best_epoch} val_acc={result.best_val_accuracy:.4f}; model {out}")
    return 0


def _read_sequence(args, user: str, session: str) -> FeatureSequence:
    mapping = load_column_mapping(args.column_map) if args.column_map else None
    raw = read_recording(args.recording, user, session, args.fps, mapping)
    return encode_bra(raw, args.target_fps)


def cmd_enroll(args) -> int:
    model = load_model(args.model)
    if model.config.mode != "embedding":
        raise ConfigError("enrollment needs an embedding-mode model")
    index_path = Path(args.index)
    index = ReferenceIndex.load(index_path) if index_path.exists() else ReferenceIndex(model.config.output_dim)
    if index.dim != model.config.output_dim:
        raise DataError(f"index dimension {index.dim} does not match model output {model.config.output_dim}")
    t0 = time.perf_counter()
    seq = _read_sequence(args, args.user, "enroll")
    w = model.config.window_len
    offsets = window_offsets(len(seq), w, args.stride)
    if not len(offsets):
        raise DataError(f"recording yields {len(seq)} frames; a window needs {w}")
    index.enroll(args.user, model.embed(window_array(seq.rows, offsets, w)), offsets)
    index.save(index_path)
    print(f"enrolled {args.user}: {len(offsets)} embeddings added in {time.perf_counter() - t0:.2f} s")
    return 0


def cmd_remove_user(args) -> int:
    index = ReferenceIndex.load(args.index)
    index.remove_user(args.user)
    index.save(args.index)
    print(f"removed {args.user}; {len(index)} entries remain")
    return 0


def cmd_identify(args) -> int:
    model = load_model(args.model)
    seq = _read_sequence(args, "unknown", "probe")
    if model.config.mode == "classification":
        result = identify_sequence_classifier(model, seq, stride=args.stride)
    else:
        if not args.index:
            raise ConfigError("--index is required for embedding models")
        index = ReferenceIndex.load(args.index)
        result = identify_sequence(model, index, seq, stride=args.stride, k=args.k)
    print(result.summary_line())
    if args.per_window:
        if args.per_window == "-":
            sys.stdout.write(result.window_csv())
        else:
            Path(args.per_window).write_text(result.window_csv(), encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    manifest = Manifest.load(args.manifest)
    items = parse_kv(Path(args.protocol).read_text(encoding="utf-8"), args.protocol) if args.protocol else {}
    protocol = EvalProtocol.from_kv(items)
    if args.seed is not None:
        protocol = replace(protocol, seed=args.seed)
    if args.permute_labels:
        protocol = replace(protocol, permute_labels=True)
    users = args.users.split(",") if args.users else manifest.users("test") or manifest.users()
    model, clf_config = None, None
    if args.classifier_config:
        clf_config, _ = load_train_config(args.classifier_config)
        if args.seed is not None:
            clf_config = replace(clf_config, seed=args.seed)
        target_fps = clf_config.target_fps
    elif args.model:
        model = load_model(args.model)
        target_fps = args.target_fps
    else:
        raise ConfigError("evaluate needs --model or --classifier-config")
    data = _two_sessions(manifest, users, target_fps)
    grid = accuracy_grid(model, data, protocol, classifier_config=clf_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.csv").write_text(grid.to_csv(), encoding="utf-8")
    (out / "summary.csv").write_text(grid.summary_csv(seed=protocol.seed), encoding="utf-8")
    for (e, u), cell in grid.cells.items():
        print(f"acc({e}|{u}) = {cell.mean:.4f} over {sum(cell.trials)} trials")
    return 0


def cmd_delta(args) -> int:
    delta = grid_delta(read_grid_csv(args.a), read_grid_csv(args.b))
    text = delta.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _recording_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--recording", required=True, help="raw CSV recording")
    p.add_argument("--fps", type=float, default=90.0, help="recording frame rate")
    p.add_argument("--column-map", help="canonical=source column mapping file")
    p.add_argument("--target-fps", type=float, default=15.0)
    p.add_argument("--stride", type=int, default=1, help="window stride in frames")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="motionid", description="Identify VR users from their movement.")
    parser.add_argument("--seed", type=int, default=None, help="override every random seed")
    parser.add_argument("--jobs", type=int, default=1, help="maximum worker count")
    parser.add_argument("--verbose", "-v", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse, validate and encode recordings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-fps", type=float, default=15.0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value synth spec file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec key")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an embedding model")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", help="add a user's reference embeddings to an index")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--user", required=True)
    _recording_args(p)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("remove-user", help="delete a user's entries from an index")
    p.add_argument("--index", required=True)
    p.add_argument("--user", required=True)
    p.set_defaults(func=cmd_remove_user)

    p = sub.add_parser("identify", help="identify the user of a recording")
    p.add_argument("--model", required=True)
    p.add_argument("--index")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--per-window", nargs="?", const="-", metavar="CSV",
                   help="write per-window predictions (stdout when no path is given)")
    _recording_args(p)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("evaluate", help="accuracy grid over enrollment and use-time lengths")
    p.add_argument("--model")
    p.add_argument("--classifier-config", help="train the classification baseline with this config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", help="key=value protocol file")
    p.add_argument("--users", help="comma list; defaults to split.test")
    p.add_argument("--permute-labels", action="store_true", help="chance-level control")
    p.add_argument("--target-fps", type=float, default=15.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("delta", help="cellwise difference of two grid CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_delta)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("motionid: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except MotionIDError as exc:
        print(f"motionid: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"motionid: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
