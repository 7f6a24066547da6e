"""Tests for run-config parsing/serialization and the command-line interface."""

import json

import numpy as np
import pytest

from volseg import (
    AugmentConfig,
    CaseEntry,
    ConfigError,
    DatasetManifest,
    EncoderConfig,
    InferenceConfig,
    LabelVolume,
    LossConfig,
    TrainConfig,
    derive_decoder_config,
    generate_toy_dataset,
    load_run_config,
    parse_run_config,
    run_config_to_dict,
    rvf_read,
)
from volseg.cli import main as cli_main
from volseg.config import SCHEMA_VERSION
from volseg.nifti import write_nifti_labels


# ---------------------------------------------------------------------------
# parsing: defaults and happy paths
# ---------------------------------------------------------------------------


def test_minimal_doc_takes_library_defaults():
    run = parse_run_config({"manifest": "m.json"}, check_paths=False)
    assert run.manifest_path == "m.json"
    assert run.seed == 0
    assert run.cache_dir is None
    assert run.output_dir is None
    assert run.encoder == EncoderConfig()
    assert run.decoder_block_channels == (128, 64, 32, 16)
    assert run.train == TrainConfig()
    assert run.augment == AugmentConfig()
    assert run.loss == LossConfig()
    assert run.inference == InferenceConfig()
    assert run.schema_version == SCHEMA_VERSION


def test_train_defaults_match_reference_recipe():
    run = parse_run_config({"manifest": "m", "train": {}}, check_paths=False)
    assert run.train.momentum == 0.99
    assert run.train.weight_decay == 3e-5
    assert run.train.init_lr == 1e-2
    assert run.train.power == 0.9
    assert run.train.batch_size == 2


def test_sections_parse_into_typed_configs():
    doc = {
        "manifest": "m",
        "seed": 7,
        "encoder": {"backend": "toy", "seed": 3, "embed_dim": 64},
        "decoder": {"block_channels": [64, 32, 16, 8]},
        "train": {"epochs": 2, "max_epoch": 4, "momentum": 0.5},
        "augment": {"p_rotation": 0.9, "p_mirror": [0.0, 0.5, 1.0]},
        "loss": {"include_background_in_dice": False},
        "inference": {"window": [2, 32, 32], "overlap": 0.25},
    }
    run = parse_run_config(doc, check_paths=False)
    assert run.seed == 7
    assert run.encoder.embed_dim == 64 and run.encoder.seed == 3
    assert run.decoder_block_channels == (64, 32, 16, 8)
    assert run.train.epochs == 2 and run.train.momentum == 0.5
    assert run.augment.p_rotation == 0.9
    assert run.augment.p_mirror == (0.0, 0.5, 1.0)
    assert run.loss.include_background_in_dice is False
    assert run.inference.window == (2, 32, 32)
    assert run.inference.overlap == 0.25


def test_augment_enabled_false_yields_identity():
    run = parse_run_config(
        {"manifest": "m", "augment": {"enabled": False}}, check_paths=False
    )
    assert run.augment == AugmentConfig.disabled()
    assert run.augment.is_identity


def test_augment_enabled_true_is_a_noop_flag():
    run = parse_run_config(
        {"manifest": "m", "augment": {"enabled": True, "p_gamma": 0.4}},
        check_paths=False,
    )
    assert run.augment.p_gamma == 0.4


# ---------------------------------------------------------------------------
# parsing: strict validation with JSONPath reporting
# ---------------------------------------------------------------------------


def test_non_object_document_rejected():
    with pytest.raises(ConfigError, match="expected object, got list") as ei:
        parse_run_config([1, 2], check_paths=False)
    assert ei.value.path == "$"


def test_missing_manifest_key():
    with pytest.raises(ConfigError, match="missing required key") as ei:
        parse_run_config({"seed": 1}, check_paths=False)
    assert ei.value.path == "$.manifest"


def test_unknown_top_level_key():
    with pytest.raises(ConfigError, match="unknown key") as ei:
        parse_run_config({"manifest": "m", "bogus": 1}, check_paths=False)
    assert ei.value.path == "$.bogus"


def test_unknown_section_key():
    with pytest.raises(ConfigError, match="unknown key") as ei:
        parse_run_config({"manifest": "m", "train": {"lr": 0.1}}, check_paths=False)
    assert ei.value.path == "$.train.lr"


def test_wrong_type_reports_full_path():
    with pytest.raises(ConfigError, match="expected number, got str") as ei:
        parse_run_config(
            {"manifest": "m", "train": {"init_lr": "fast"}}, check_paths=False
        )
    assert ei.value.path == "$.train.init_lr"


def test_bool_does_not_pass_as_integer():
    with pytest.raises(ConfigError, match="expected integer, got bool") as ei:
        parse_run_config({"manifest": "m", "seed": True}, check_paths=False)
    assert ei.value.path == "$"


def test_section_must_be_object():
    with pytest.raises(ConfigError, match="expected object, got int") as ei:
        parse_run_config({"manifest": "m", "encoder": 3}, check_paths=False)
    assert ei.value.path == "$.encoder"


def test_dataclass_validation_surfaces_as_config_error():
    with pytest.raises(ConfigError, match="momentum") as ei:
        parse_run_config(
            {"manifest": "m", "train": {"momentum": 1.5}}, check_paths=False
        )
    assert ei.value.path == "$.train"


def test_decoder_widths_must_strictly_decrease():
    with pytest.raises(ConfigError, match="strictly decrease") as ei:
        parse_run_config(
            {"manifest": "m", "decoder": {"block_channels": [8, 16, 32, 64]}},
            check_paths=False,
        )
    assert ei.value.path == "$.decoder"


def test_inference_overlap_must_be_below_one():
    with pytest.raises(ConfigError, match="overlap") as ei:
        parse_run_config(
            {"manifest": "m", "inference": {"overlap": 1.0}}, check_paths=False
        )
    assert ei.value.path == "$.inference"


def test_unsupported_schema_version_rejected():
    with pytest.raises(ConfigError, match="unsupported version 2") as ei:
        parse_run_config({"manifest": "m", "schema_version": 2}, check_paths=False)
    assert ei.value.path == "$.schema_version"


def test_schema_version_must_be_integer():
    with pytest.raises(ConfigError, match="expected integer") as ei:
        parse_run_config({"manifest": "m", "schema_version": "one"}, check_paths=False)
    assert ei.value.path == "$.schema_version"


def test_disabled_augment_rejects_extra_keys():
    with pytest.raises(ConfigError, match="cannot be combined") as ei:
        parse_run_config(
            {"manifest": "m", "augment": {"enabled": False, "p_gamma": 0.5}},
            check_paths=False,
        )
    assert ei.value.path == "$.augment"


# ---------------------------------------------------------------------------
# parsing: path resolution and existence checks
# ---------------------------------------------------------------------------


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    doc = {"manifest": "manifest.json", "cache_dir": "cache", "output_dir": "runs"}
    run = parse_run_config(doc, base_dir=tmp_path)
    assert run.manifest_path == str(tmp_path / "manifest.json")
    assert run.cache_dir == str(tmp_path / "cache")
    assert run.output_dir == str(tmp_path / "runs")


def test_absolute_manifest_path_left_alone(tmp_path):
    target = tmp_path / "elsewhere.json"
    target.write_text("{}")
    other = tmp_path / "configs"
    other.mkdir()
    run = parse_run_config({"manifest": str(target)}, base_dir=other)
    assert run.manifest_path == str(target)


def test_missing_manifest_path_fails_when_checked(tmp_path):
    with pytest.raises(ConfigError, match="does not exist") as ei:
        parse_run_config({"manifest": "nope.json"}, base_dir=tmp_path)
    assert ei.value.path == "$.manifest"


def test_manifest_existence_skipped_without_base_dir():
    run = parse_run_config({"manifest": "nope.json"})
    assert run.manifest_path == "nope.json"


def test_encoder_checkpoint_resolved_and_checked(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    (tmp_path / "ck").mkdir()
    doc = {
        "manifest": "manifest.json",
        "encoder": {
            "backend": "pretrained_vit",
            "checkpoint_path": "ck",
            "embed_dim": 8,
            "vit_width": 16,
            "vit_depth": 1,
            "vit_heads": 2,
            "vit_pretrain_grid": 4,
        },
    }
    run = parse_run_config(doc, base_dir=tmp_path)
    assert run.encoder.checkpoint_path == str(tmp_path / "ck")

    doc["encoder"]["checkpoint_path"] = "missing_ck"
    with pytest.raises(ConfigError, match="does not exist") as ei:
        parse_run_config(doc, base_dir=tmp_path)
    assert ei.value.path == "$.encoder.checkpoint_path"


# ---------------------------------------------------------------------------
# serialization round trip and file loading
# ---------------------------------------------------------------------------


def test_serialize_parse_round_trip():
    doc = {
        "schema_version": 1,
        "manifest": "data/manifest.json",
        "seed": 11,
        "cache_dir": "cache",
        "output_dir": "runs/a",
        "encoder": {"backend": "toy", "seed": 9, "embed_dim": 64},
        "decoder": {"block_channels": [64, 32, 16, 8]},
        "train": {
            "epochs": 4,
            "iters_per_epoch": 7,
            "batch_size": 3,
            "init_lr": 0.02,
            "power": 0.8,
            "max_epoch": 9,
            "momentum": 0.5,
            "weight_decay": 1e-4,
            "foreground_fraction": 0.5,
            "checkpoint_every": 2,
            "deterministic": True,
        },
        "augment": {"p_rotation": 0.1, "p_mirror": [0.0, 0.5, 1.0]},
        "loss": {"eps": 1e-6, "include_background_in_dice": False,
                 "ds_weights": [0.5, 0.25, 0.25]},
        "inference": {"window": [2, 32, 32], "overlap": 0.25},
    }
    run = parse_run_config(doc, check_paths=False)
    again = parse_run_config(run_config_to_dict(run), check_paths=False)
    assert again == run


def test_serialized_dict_is_json_and_carries_schema_version():
    run = parse_run_config({"manifest": "m"}, check_paths=False)
    doc = run_config_to_dict(run)
    assert doc["schema_version"] == SCHEMA_VERSION
    assert set(doc) <= {"schema_version", "manifest", "seed", "cache_dir",
                        "output_dir", "encoder", "decoder", "train", "augment",
                        "loss", "inference"}
    json.dumps(doc)  # must be directly serializable


def test_load_run_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist") as ei:
        load_run_config(tmp_path / "absent.json")
    assert ei.value.path == "$"


def test_load_run_config_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON") as ei:
        load_run_config(path)
    assert ei.value.path == "$"


def test_load_run_config_resolves_relative_manifest(tmp_path):
    generate_toy_dataset(tmp_path, num_cases=2, num_classes=2,
                         shape=(3, 32, 32), seed=5, num_val=1)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"manifest": "manifest.json"}))
    run = load_run_config(cfg)
    assert run.manifest_path == str(tmp_path / "manifest.json")


def test_derive_decoder_config_follows_data():
    manifest = DatasetManifest(
        cases=[CaseEntry(case_id="a", image_path="i.nii.gz",
                         label_path="l.nii.gz", split="train")],
        patch_size=(4, 32, 32),
        num_classes=5,
        modality_count=4,
        normalization="zscore",
        root=".",
    )
    run = parse_run_config(
        {"manifest": "m", "encoder": {"embed_dim": 64},
         "decoder": {"block_channels": [32, 16, 8, 4]}},
        check_paths=False,
    )
    dec = derive_decoder_config(run, manifest)
    assert dec.in_channels == 64 * 4
    assert dec.num_classes == 5
    assert dec.block_channels == (32, 16, 8, 4)


# ---------------------------------------------------------------------------
# CLI: end-to-end pipeline at desk scale
# ---------------------------------------------------------------------------


def _fast_toy_run(tmp_path):
    """make-toy-dataset --emit-config, then shrink the training schedule."""
    ds = tmp_path / "ds"
    rc = cli_main([
        "make-toy-dataset", "--out-dir", str(ds), "--cases", "2",
        "--classes", "2", "--shape", "3,32,32", "--val", "1", "--emit-config",
    ])
    assert rc == 0
    cfg_path = ds / "config.json"
    doc = json.loads(cfg_path.read_text())
    doc["train"].update(
        {"epochs": 1, "iters_per_epoch": 2, "batch_size": 1, "max_epoch": 8}
    )
    cfg_path.write_text(json.dumps(doc))
    return ds, cfg_path


def test_cli_pipeline_train_predict_evaluate(tmp_path, capsys):
    ds, cfg = _fast_toy_run(tmp_path)
    assert (ds / "manifest.json").exists()

    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(cfg),
                     "--out-dir", str(out), "--quiet"]) == 0
    train_out = capsys.readouterr().out
    assert "trained 1 epochs" in train_out
    ckpt = out / "checkpoint_final"
    assert ckpt.is_dir()
    assert (out / "train_log.jsonl").exists()

    pred = tmp_path / "pred"
    assert cli_main(["predict", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--out-dir", str(pred), "--split", "val",
                     "--save-probs"]) == 0
    assert (pred / "case_001.nii.gz").exists()
    probs, meta = rvf_read(pred / "case_001_probs.rvf")
    assert probs.shape == (2, 3, 32, 32)
    assert probs.dtype == np.float32
    assert meta["case_id"] == "case_001"
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-4)

    out_json = tmp_path / "metrics.json"
    out_csv = tmp_path / "metrics.csv"
    assert cli_main(["evaluate", "--manifest", str(ds / "manifest.json"),
                     "--pred-dir", str(pred), "--split", "val",
                     "--out-json", str(out_json), "--out-csv", str(out_csv)]) == 0
    eval_out = capsys.readouterr().out
    assert "case_001: mean_dsc=" in eval_out
    assert "mean_dsc=" in eval_out.splitlines()[-1]
    report = json.loads(out_json.read_text())
    assert [c["case_id"] for c in report["cases"]] == ["case_001"]
    assert set(report["summary"]) == {"per_class", "mean_dsc", "mean_hd95"}
    csv_text = out_csv.read_text()
    assert csv_text.startswith("case_id,class,dsc,hd95")
    assert "case_001,mean," in csv_text

    emb_path = tmp_path / "case_000.rvf"
    assert cli_main(["extract-embeddings", "--config", str(cfg),
                     "--case", "case_000", "--out", str(emb_path)]) == 0
    emb, emb_meta = rvf_read(emb_path)
    assert emb.shape == (256, 3, 2, 2)
    assert emb_meta["case_id"] == "case_000"
    assert emb_meta["stride"] == 16

    rc = cli_main(["predict", "--config", str(cfg), "--checkpoint", str(ckpt),
                   "--out-dir", str(pred), "--split", "val", "--case", "ghost"])
    assert rc == 2
    assert "not found in split" in capsys.readouterr().err


def test_cli_extract_embeddings_unknown_case(tmp_path, capsys):
    ds, cfg = _fast_toy_run(tmp_path)
    rc = cli_main(["extract-embeddings", "--config", str(cfg),
                   "--case", "ghost", "--out", str(tmp_path / "x.rvf")])
    assert rc == 2
    assert "not found in manifest" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# CLI: parameter counting
# ---------------------------------------------------------------------------


def test_cli_count_params_reference_table(capsys):
    assert cli_main(["count-params", "--in-channels", "256",
                     "--num-classes", "9"]) == 0
    out = capsys.readouterr().out
    assert "closed-form 1881035 == allocated 1881035: match" in out


def test_cli_count_params_json(capsys):
    assert cli_main(["count-params", "--in-channels", "1024",
                     "--num-classes", "4",
                     "--block-channels", "128,64,32,16", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["total"] == 4633252
    assert doc["allocated"] == 4633252
    assert doc["match"] is True
    assert doc["total"] == sum(doc["by_layer"].values())


def test_cli_count_params_from_config(tmp_path, capsys):
    ds, cfg = _fast_toy_run(tmp_path)
    assert cli_main(["count-params", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert ": match" in out


def test_cli_count_params_requires_dimensions(capsys):
    assert cli_main(["count-params"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "--in-channels" in err


# ---------------------------------------------------------------------------
# CLI: failure modes exit 2 with a single error line
# ---------------------------------------------------------------------------


def test_cli_missing_config_exits_2(tmp_path, capsys):
    rc = cli_main(["train", "--config", str(tmp_path / "nope.json")])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "does not exist" in err
    assert err.strip().count("\n") == 0


def test_cli_train_without_output_dir(tmp_path, capsys):
    ds, cfg = _fast_toy_run(tmp_path)
    rc = cli_main(["train", "--config", str(cfg)])
    assert rc == 2
    assert "no output directory" in capsys.readouterr().err


def test_cli_toy_dataset_rejects_too_many_classes(tmp_path, capsys):
    rc = cli_main(["make-toy-dataset", "--out-dir", str(tmp_path / "d"),
                   "--shape", "3,32,32"])
    assert rc == 2
    assert "need height" in capsys.readouterr().err


def test_cli_evaluate_missing_prediction(tmp_path, capsys):
    ds = tmp_path / "ds"
    generate_toy_dataset(ds, num_cases=2, num_classes=2,
                         shape=(3, 32, 32), seed=3, num_val=1)
    rc = cli_main(["evaluate", "--manifest", str(ds / "manifest.json"),
                   "--pred-dir", str(tmp_path / "empty"), "--split", "val"])
    assert rc == 2
    assert "missing prediction" in capsys.readouterr().err


def test_cli_evaluate_names_offending_case(tmp_path, capsys):
    ds = tmp_path / "ds"
    generate_toy_dataset(ds, num_cases=2, num_classes=2,
                         shape=(3, 32, 32), seed=3, num_val=1)
    pred = tmp_path / "pred"
    pred.mkdir()
    bad = np.full((3, 32, 32), 5, dtype=np.int64)
    write_nifti_labels(pred / "case_001.nii.gz",
                       LabelVolume(labels=bad, num_classes=6),
                       spacing=(2.5, 1.0, 1.0))
    rc = cli_main(["evaluate", "--manifest", str(ds / "manifest.json"),
                   "--pred-dir", str(pred), "--split", "val"])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("error: case case_001:")


def test_cli_bad_window_format_is_an_argparse_error():
    with pytest.raises(SystemExit) as ei:
        cli_main(["predict", "--config", "x", "--checkpoint", "y",
                  "--out-dir", "z", "--window", "2,32"])
    assert ei.value.code == 2
