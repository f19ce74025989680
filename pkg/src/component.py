import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from keboola.component.base import ComponentBase, sync_action
from keboola.component.dao import TableDefinition
from keboola.component.exceptions import UserException
from keboola.csvwriter import ElasticDictWriter

from client import CaseNotFoundError, DescriptionClient, VitalCaseClient, api_key_filter
from cohort import (
    Partition,
    detect_ioh_episodes,
    load_instances,
    slice_instances,
    split_by_surgery,
    store_instances,
)
from configuration import (
    PRESETS_DIR,
    Ablation,
    ConfigValidationError,
    PipelineConfig,
    Stage,
    deep_merge,
    load_pipeline_config,
    parse_override,
)
from dataio import (
    PatientStatic,
    impute_missing,
    load_cohort,
    load_patients,
    load_raw_track,
    quality_filter,
    resample_map,
    store_cohort,
    synth_cohort,
)
from evalreport import (
    METRIC_COLUMNS,
    EvalReport,
    PersistenceBaseline,
    bench_inference,
    evaluate_model,
    render_report,
)
from mtrda import assemble_x2, augment_instances, fit_from_instances, save_denoiser
from pcdg import (
    ClinicalDescription,
    Vocabulary,
    WordTokenizer,
    build_description_corpus,
    build_vocabulary,
    encode_descriptions,
    load_descriptions,
    load_rules,
    store_descriptions,
)
from trainer import (
    TRAINING_LOG_COLUMNS,
    Checkpoint,
    FusionPredictor,
    TrainingDivergedError,
    apply_ablation,
    finetune,
    pretrain,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

COHORT_DIR = "cohort"
PREPARED_DIR = "prepared"
MANIFEST_DIR = "manifests"

PLANTED_FILE = f"{COHORT_DIR}/planted.json"
SPLIT_FILE = f"{PREPARED_DIR}/split.json"
DESCRIPTIONS_FILE = f"{PREPARED_DIR}/descriptions.jsonl"
VOCAB_FILE = f"{PREPARED_DIR}/vocab.json"
X2_FILE = "augment/train_x2.jsonl"
DENOISER_FILE = "augment/denoiser.pt"
PRETRAIN_CHECKPOINT = "pretrain/checkpoint.pt"
FINETUNE_CHECKPOINT = "finetune/checkpoint.pt"
EVALUATION_FILE = "evaluate/evaluation.json"
LATENCY_FILE = "bench/latency.json"

COMMAND_NAMES = ("synth", "ingest", "prepare", "augment", "pretrain", "finetune", "evaluate", "report", "bench")
PIPELINE_COMMANDS = ("prepare", "augment", "pretrain", "finetune", "evaluate", "report")


def instances_file(partition: Partition) -> str:
    return f"{PREPARED_DIR}/{partition}.jsonl"


class MissingArtifactError(UserException):
    def __init__(self, artifact: str, command: str):
        super().__init__(f"Missing artifact '{artifact}'; run the '{command}' command first")
        self.artifact = artifact
        self.command = command


@dataclass
class WriterCacheRecord:
    writer: ElasticDictWriter
    table_definition: TableDefinition


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Component(ComponentBase):
    """Runs one pipeline command (or the whole pipeline) against an artifacts directory.

    The command comes from the CLI or from the ``action`` of the Keboola configuration;
    ``run`` executes every stage in order.
    """

    def __init__(
        self,
        data_path_override: str | None = None,
        overrides: dict[str, Any] | None = None,
        command: str | None = None,
    ):
        super().__init__(data_path_override=data_path_override)
        self._writer_cache: dict[str, WriterCacheRecord] = {}
        self.command = command or self.configuration.action or "run"
        if self.command not in (*COMMAND_NAMES, "run", "presets"):
            raise ConfigValidationError([f"unknown command '{self.command}'"])
        config = load_pipeline_config(self.configuration.parameters, overrides)
        if config.train.ablation != Ablation.FULL:
            config = apply_ablation(config.train.ablation, config)
        self.config: PipelineConfig = config
        self.artifacts_dir = Path(config.artifacts_dir or Path(self.data_folder_path) / "artifacts")
        self._inputs: dict[str, str] = {}
        self._outputs: dict[str, str] = {}
        self._install_log_filter()

    @property
    def commands(self) -> dict[str, Callable[[], None]]:
        return {
            "synth": self.cmd_synth,
            "ingest": self.cmd_ingest,
            "prepare": self.cmd_prepare,
            "augment": self.cmd_augment,
            "pretrain": self.cmd_pretrain,
            "finetune": self.cmd_finetune,
            "evaluate": self.cmd_evaluate,
            "report": self.cmd_report,
            "bench": self.cmd_bench,
        }

    def run(self) -> None:
        if self.command == "presets":
            self.list_presets()
            return
        if self.command == "run":
            self.run_pipeline()
        else:
            self.execute_command(self.command)
        self._finalize_tables()

    def run_pipeline(self) -> None:
        source = "synth" if self.config.dataset.source == "synth" else "ingest"
        for command in (source, *PIPELINE_COMMANDS):
            self.execute_command(command)

    def execute_command(self, command: str) -> None:
        logger.info(f"Running command '{command}' (seed {self.config.seed}, artifacts {self.artifacts_dir})")
        self._inputs, self._outputs = {}, {}
        self.commands[command]()
        self._write_run_manifest(command)

    # artifact bookkeeping

    def _path(self, relative: str) -> Path:
        return self.artifacts_dir / relative

    def _require(self, relative: str, command: str) -> Path:
        path = self._path(relative)
        if not path.exists():
            raise MissingArtifactError(relative, command)
        self._inputs[relative] = sha256_file(path)
        return path

    def _produced(self, relative: str) -> Path:
        path = self._path(relative)
        self._outputs[relative] = sha256_file(path)
        return path

    def _output_path(self, relative: str) -> Path:
        path = self._path(relative)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def config_hash(self) -> str:
        payload = json.dumps(self.config.fingerprint_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def _write_run_manifest(self, command: str) -> None:
        manifest = {
            "command": command,
            "config_sha256": self.config_hash(),
            "seed": self.config.seed,
            "inputs": dict(sorted(self._inputs.items())),
            "outputs": dict(sorted(self._outputs.items())),
        }
        path = self._output_path(f"{MANIFEST_DIR}/{command}.json")
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    def _install_log_filter(self) -> None:
        # handlers are created by ComponentBase after client.py installed its logger filters
        for handler in logging.getLogger().handlers:
            handler.addFilter(api_key_filter)

    def _resolve_input(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else Path(self.data_folder_path) / candidate

    # commands

    def cmd_synth(self) -> None:
        """Generate the synthetic cohort and record the planted episodes."""
        cohort = synth_cohort(self.config.dataset.synth, self.config.seed)
        store_cohort(self._path(COHORT_DIR), cohort.patients, cohort.series)
        with self._output_path(PLANTED_FILE).open("w", encoding="utf-8") as fh:
            json.dump(cohort.planted, fh, indent=1, sort_keys=True)
        self._record_cohort_outputs()
        self._produced(PLANTED_FILE)

    def _record_cohort_outputs(self) -> None:
        for name in ("patients.jsonl", "series_meta.jsonl", "series.csv"):
            self._produced(f"{COHORT_DIR}/{name}")

    def cmd_ingest(self) -> None:
        """Build the cohort from static attributes plus external or local raw MAP tracks."""
        dataset = self.config.dataset
        if dataset.source == "synth":
            raise UserException("dataset.source is 'synth'; use the 'synth' command to create the cohort")
        static_path = self._resolve_input(dataset.static_path)
        if not static_path.exists():
            raise UserException(f"Static attribute file {static_path} does not exist")
        patients = load_patients(static_path)
        interval = self.config.window.sampling_interval_s

        kept_patients, series = [], []
        case_client = None
        if dataset.source == "external":
            ext = dataset.external
            case_client = VitalCaseClient(ext.endpoint, ext.cache_dir, ext.timeout_s)
        for patient in patients:
            points = self._ingest_points(patient, case_client)
            if not points:
                continue
            try:
                series.append(resample_map(points, interval, patient.patient_id))
            except ValueError as e:
                logger.warning(f"Skipping patient {patient.patient_id}: {e}")
                continue
            kept_patients.append(patient)

        if not series:
            raise UserException("Ingest produced no series; check dataset.static_path and the raw sources")
        if case_client is not None:
            logger.info(f"External source: {case_client.network_calls} network call(s), rest served from cache")
        store_cohort(self._path(COHORT_DIR), kept_patients, series)
        self._record_cohort_outputs()

    def _ingest_points(self, patient: PatientStatic, case_client: VitalCaseClient | None) -> list[tuple[float, float]]:
        dataset = self.config.dataset
        if case_client is not None:
            try:
                return case_client.fetch_case(patient.patient_id, dataset.external.track_name)
            except CaseNotFoundError as e:
                logger.warning(f"Skipping patient {patient.patient_id}: {e}")
                return []
        raw_path = self._resolve_input(dataset.raw_dir) / f"{patient.patient_id}.csv"
        if not raw_path.exists():
            logger.warning(f"Skipping patient {patient.patient_id}: no raw track at {raw_path}")
            return []
        return load_raw_track(raw_path)

    def cmd_prepare(self) -> None:
        """Turn the cohort into per-partition instances plus descriptions and the vocabulary."""
        source_command = "synth" if self.config.dataset.source == "synth" else "ingest"
        for name in ("patients.jsonl", "series_meta.jsonl", "series.csv"):
            self._require(f"{COHORT_DIR}/{name}", source_command)
        patients, series = load_cohort(self._path(COHORT_DIR))
        window, quality = self.config.window, self.config.dataset.quality

        instances_by_patient = {}
        rejected = 0
        for s in series:
            if abs(s.sampling_interval_s - window.sampling_interval_s) > 1e-9:
                raise UserException(
                    f"Series {s.patient_id} is sampled every {s.sampling_interval_s} s but the window policy "
                    f"expects {window.sampling_interval_s} s"
                )
            decision = quality_filter(s, quality.min_duration_s, quality.max_missing_frac)
            if not decision.accepted:
                logger.warning(f"Series {s.patient_id} rejected by quality filter ({decision.reason})")
                rejected += 1
                continue
            imputed = impute_missing(s)
            instances_by_patient[s.patient_id] = slice_instances(
                imputed, detect_ioh_episodes(imputed), window, self.config.train.strict_ioh_mask
            )
        logger.info(f"Quality filter kept {len(instances_by_patient)} series, rejected {rejected}")

        eligible = [p for p in patients if p.patient_id in instances_by_patient]
        if not eligible:
            raise UserException("No series passed the quality filter; nothing to prepare")
        split = split_by_surgery(eligible, self.config.dataset.split, self.config.seed)
        for partition in Partition:
            partition_instances = [i for pid in split.members(partition) for i in instances_by_patient[pid]]
            count = store_instances(self._output_path(instances_file(partition)), partition_instances)
            positives = sum(i.label for i in partition_instances)
            logger.info(f"{partition}: {count} instances ({positives} positive, {count - positives} negative)")
            self._produced(instances_file(partition))
        with self._output_path(SPLIT_FILE).open("w", encoding="utf-8") as fh:
            json.dump(split.to_dict(), fh, indent=1)
        self._produced(SPLIT_FILE)

        self._prepare_descriptions(eligible)

    def _prepare_descriptions(self, patients: list[PatientStatic]) -> None:
        pcdg = self.config.pcdg
        rules = load_rules(self._resolve_input(pcdg.rules_path) if pcdg.rules_path else None)
        client_config = pcdg.external_client
        client = None
        if client_config.enabled:
            client = DescriptionClient(
                client_config.endpoint, client_config.api_key, client_config.model, client_config.timeout_s
            )
        records = build_description_corpus(
            patients, rules, client, max_workers=client_config.max_workers, fallback=client_config.fallback
        )
        store_descriptions(self._output_path(DESCRIPTIONS_FILE), records)
        self._produced(DESCRIPTIONS_FILE)

        terms = rules.domain_terms() if pcdg.extend_vocabulary else []
        vocab = build_vocabulary([r.text for r in records], terms)
        vocab.save(self._output_path(VOCAB_FILE))
        self._produced(VOCAB_FILE)
        logger.info(f"Built {len(records)} description(s) and a vocabulary of {len(vocab)} tokens")

    def cmd_augment(self) -> None:
        """Fit the residual denoiser and write the augmented pretraining set."""
        train = load_instances(self._require(instances_file(Partition.TRAIN), "prepare"))
        mtrda = self.config.mtrda
        fit_on = [i for i in train if i.label] if mtrda.positives_only else train
        if not mtrda.augment or mtrda.augment_count == 0:
            logger.info("Augmentation disabled; pretraining uses the original training set")
            x2 = train
        elif not fit_on:
            logger.warning("No positive training instances to augment; the pretraining set is left unchanged")
            x2 = train
        else:
            fit = fit_from_instances(fit_on, mtrda, self.config.seed)
            save_denoiser(self._output_path(DENOISER_FILE), fit, mtrda)
            self._produced(DENOISER_FILE)
            x2 = assemble_x2(train, augment_instances(train, fit, mtrda, self.config.seed))
        store_instances(self._output_path(X2_FILE), x2)
        self._produced(X2_FILE)
        logger.info(f"Training set: {len(train)} original, {len(x2) - len(train)} augmented instance(s)")

    def _load_descriptions(self) -> tuple[dict[str, ClinicalDescription], int]:
        vocab = Vocabulary.load(self._require(VOCAB_FILE, "prepare"))
        records = load_descriptions(self._require(DESCRIPTIONS_FILE, "prepare"))
        return encode_descriptions(records, WordTokenizer(vocab), self.config.pcdg.max_tokens), len(vocab)

    def _save_checkpoint(self, checkpoint: Checkpoint, relative: str) -> None:
        checkpoint.save(self._output_path(relative))
        self._produced(relative)
        self._write_rows("training_log", checkpoint.history)

    def _train_stage(self, stage: Stage) -> None:
        # pretraining sees the augmented set, fine-tuning the original training partition
        if stage == Stage.PRETRAIN:
            train = load_instances(self._require(X2_FILE, "augment"))
        else:
            train = load_instances(self._require(instances_file(Partition.TRAIN), "prepare"))
        val = load_instances(self._require(instances_file(Partition.VAL), "prepare"))
        descriptions, vocab_size = self._load_descriptions()
        train_config = self.config.stage_config(stage)
        target = PRETRAIN_CHECKPOINT if stage == Stage.PRETRAIN else FINETUNE_CHECKPOINT
        try:
            if stage == Stage.PRETRAIN:
                checkpoint = pretrain(train, val, descriptions, self.config.model, train_config, vocab_size)
            else:
                start = None
                if train_config.ablation != Ablation.NO_PRETRAIN:
                    start = Checkpoint.load(self._require(PRETRAIN_CHECKPOINT, "pretrain"))
                checkpoint = finetune(train, val, descriptions, self.config.model, train_config, vocab_size, start)
        except TrainingDivergedError as e:
            if e.checkpoint is not None:
                e.checkpoint.save(self._output_path(target.replace("checkpoint", "diverged")))
            raise
        self._save_checkpoint(checkpoint, target)

    def cmd_pretrain(self) -> None:
        """Train on the augmented set; a no-op under the no_pretrain ablation."""
        if self.config.train.skip_pretrain:
            logger.info("Pretraining skipped (no_pretrain ablation or train.skip_pretrain)")
            return
        self._train_stage(Stage.PRETRAIN)

    def cmd_finetune(self) -> None:
        """Fine-tune on the original training partition, starting from the pretrain checkpoint."""
        self._train_stage(Stage.FINETUNE)

    def _load_predictor(self) -> FusionPredictor:
        checkpoint = Checkpoint.load(self._require(FINETUNE_CHECKPOINT, "finetune"))
        descriptions, _ = self._load_descriptions()
        return FusionPredictor(checkpoint.build_model(), descriptions)

    def cmd_evaluate(self) -> None:
        """Score the fine-tuned model and the persistence baseline on the test partition."""
        predictor = self._load_predictor()
        test = load_instances(self._require(instances_file(Partition.TEST), "prepare"))
        window = self.config.window
        report = evaluate_model(predictor, test, window, name="iohfuse")
        baseline = evaluate_model(PersistenceBaseline(), test, window)
        payload = {"model": report.model_dump(mode="json"), "baselines": [baseline.model_dump(mode="json")]}
        with self._output_path(EVALUATION_FILE).open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
        self._produced(EVALUATION_FILE)
        self._write_rows("metrics", [r.summary.model_dump() for r in (report, baseline)])

    def cmd_report(self) -> None:
        """Render the summary files and figures from the stored evaluation."""
        with self._require(EVALUATION_FILE, "evaluate").open(encoding="utf-8") as fh:
            payload = json.load(fh)
        report = EvalReport.model_validate(payload["model"])
        baselines = [EvalReport.model_validate(b) for b in payload.get("baselines", [])]
        out_dir = self._path(self.config.eval.out_dir)
        for path in render_report(report, out_dir, self.config.eval.overlay_count, baselines):
            self._produced(path.relative_to(self.artifacts_dir).as_posix())

    def cmd_bench(self) -> None:
        """Measure single-forecast inference latency on one test instance."""
        predictor = self._load_predictor()
        test = load_instances(self._require(instances_file(Partition.TEST), "prepare"))
        if not test:
            raise UserException("The test partition is empty; nothing to benchmark")
        stats = bench_inference(predictor, test[:1], self.config.eval.bench_repetitions, self.config.eval.bench_warmup)
        logger.info(f"Inference latency per forecast: median {stats.median_ms:.3f} ms, p95 {stats.p95_ms:.3f} ms")
        self._output_path(LATENCY_FILE).write_text(stats.model_dump_json(indent=1) + "\n", encoding="utf-8")
        self._produced(LATENCY_FILE)

    # Keboola output tables

    def _finalize_tables(self) -> None:
        for cache_record in self._writer_cache.values():
            cache_record.writer.writeheader()
            cache_record.writer.close()
            self.write_manifest(cache_record.table_definition)

    def _write_rows(self, table_name: str, rows: list[dict]) -> None:
        if not rows:
            return
        if table_name not in self._writer_cache:
            columns = TRAINING_LOG_COLUMNS if table_name == "training_log" else METRIC_COLUMNS
            primary_key = ["stage", "epoch"] if table_name == "training_log" else ["predictor"]
            table_def = self.create_out_table_definition(f"{table_name}.csv", primary_key=primary_key)
            Path(table_def.full_path).parent.mkdir(parents=True, exist_ok=True)
            writer = ElasticDictWriter(table_def.full_path, columns)
            self._writer_cache[table_name] = WriterCacheRecord(writer=writer, table_definition=table_def)
        writer = self._writer_cache[table_name].writer
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})

    @sync_action("presets")
    def list_presets(self) -> list[dict[str, Any]]:
        return [{"value": p.stem, "label": p.stem} for p in sorted(PRESETS_DIR.glob("*.json"))]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iohfuse", description="IOH forecasting pipeline")
    parser.add_argument("command", nargs="?", choices=[*COMMAND_NAMES, "run", "presets"], default=None)
    parser.add_argument("--data-dir", help="Keboola data directory holding config.json (default: KBC_DATADIR)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", help="artifacts directory")
    parser.add_argument("--ablation", choices=[a.value for a in Ablation])
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")
    return parser


def cli_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for assignment in args.overrides:
        overrides = deep_merge(overrides, parse_override(assignment))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir:
        overrides["artifacts_dir"] = args.out_dir
    if args.ablation:
        overrides = deep_merge(overrides, {"train": {"ablation": args.ablation}})
    return overrides


def main(argv: list[str] | None = None) -> int:
    """Exit with EXIT_CONFIG (2) when the configuration is invalid and EXIT_RUNTIME (3) when a command fails."""
    args = build_parser().parse_args(argv)
    try:
        overrides = cli_overrides(args)
        comp = Component(
            data_path_override=args.data_dir,
            overrides=overrides,
            command=args.command,
        )
    except (ConfigValidationError, ValueError) as exc:
        logger.error(str(exc))
        return EXIT_CONFIG
    if comp.command == "presets":
        presets = comp.list_presets()
        # under any action other than "run" the sync-action wrapper has already printed the result
        if (comp.configuration.action or "run") == "run":
            print(json.dumps(presets, indent=2))
        return EXIT_OK
    try:
        comp.run()
    except Exception as exc:
        logger.exception(exc)
        return EXIT_RUNTIME
    return EXIT_OK


"""
        Main entrypoint
"""


if __name__ == "__main__":
    sys.exit(main())
