import json
import shutil

import numpy as np
import pytest
import torch

import mutualprompt.trainer as T
from mutualprompt.config import ConfigError, Mode
from mutualprompt.data import generate
from mutualprompt.gradcheck import micro_batch
from mutualprompt.trainer import (
    CHECKPOINT_FILE,
    METRICS_FILE,
    CheckpointError,
    GuardedDomain,
    NonFiniteLossError,
    StepBatch,
    build_model,
    compute_losses,
    confusion_matrix,
    encode_domains,
    load_checkpoint,
    make_optimizer,
    restore_model,
    train,
    train_dg,
    train_msda,
    train_on_embeddings,
    train_step,
)
from mutualprompt.data import export_embeddings, ingest_embeddings

from conftest import tiny_dg_config, tiny_msda_config, tiny_run_config


def _encoder_snapshot(model):
    return {k: v.clone() for k, v in model.encoders.state_dict().items()}


def _same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# -- registry and single steps ------------------------------------------------


def test_trainable_registry_is_exact():
    model = build_model(tiny_run_config())
    opt = make_optimizer(model, tiny_run_config())
    groups = model.trainable_groups()
    assert set(groups) == {"p", "G", "gamma_v", "gamma_s"}
    ids = {id(p) for ps in groups.values() for p in ps}
    assert {id(p) for p in opt.params.values()} == ids
    assert len(ids) == len(opt.params)
    assert groups["p"][0] is model.prompts.p
    assert {id(p) for p in groups["G"]} == {id(p) for p in model.prompter.g_parameters()}
    assert not any(n.startswith("encoders.") for n in opt.params)
    assert all(not p.requires_grad for p in model.encoders.parameters())
    # anything left over that requires grad must be in the registry
    leftovers = [n for n, p in model.named_parameters() if p.requires_grad and id(p) not in ids]
    assert leftovers == []


def test_zero_lr_step_changes_nothing_but_reports_loss():
    cfg = tiny_run_config(learning_rate=0.0, use_sc=False, use_idc=False, use_im=False)
    model = build_model(cfg)
    before = {n: p.detach().clone() for n, p in model.named_trainable().items()}
    batch = micro_batch(cfg, size=4)
    batch.target_weak = batch.target_strong = batch.target_pseudo = None
    out = train_step(model, make_optimizer(model, cfg), batch, cfg)
    assert set(out.as_floats()) == {"sup_s", "sup", "total"}
    assert np.isfinite(out.as_floats()["total"])
    assert _same_state(before, {n: p.detach() for n, p in model.named_trainable().items()})


def test_step_keeps_encoders_frozen():
    cfg = tiny_run_config()
    model = build_model(cfg)
    snap = _encoder_snapshot(model)
    opt = make_optimizer(model, cfg)
    for b in range(2):
        train_step(model, opt, micro_batch(cfg, size=4, seed=b), cfg)
    assert _same_state(snap, model.encoders.state_dict())


def test_single_step_decreases_loss_on_fixed_batch():
    cfg = tiny_run_config()
    model = build_model(cfg)
    batch = micro_batch(cfg, size=6)
    before = float(compute_losses(model, batch, cfg).total.detach())
    train_step(model, make_optimizer(model, cfg), batch, cfg)
    with torch.no_grad():
        after = float(compute_losses(model, batch, cfg).total)
    assert after < before


def test_uda_breakdown_terms():
    cfg = tiny_run_config()
    out = compute_losses(build_model(cfg), micro_batch(cfg), cfg)
    f = out.as_floats()
    assert set(f) == {"sup_s", "sc_s", "idc_s", "sup_t", "sc_t", "idc_t", "im", "sup", "sc", "idc", "total"}
    assert f["sup"] == pytest.approx(f["sup_s"] + f["sup_t"], abs=1e-12)
    assert f["idc"] == pytest.approx(f["idc_s"] + f["idc_t"], abs=1e-12)
    assert f["total"] == pytest.approx(f["sup"] + f["sc"] + f["idc"] + f["im"], abs=1e-12)
    assert f["im"] <= 1e-12


def test_toggles_remove_terms():
    cfg = tiny_run_config(use_sc=False, use_idc=False, use_im=False)
    f = compute_losses(build_model(cfg), micro_batch(cfg), cfg).as_floats()
    assert set(f) == {"sup_s", "sup_t", "sup", "total"}


def test_non_finite_loss_aborts_with_per_term_values():
    cfg = tiny_run_config()
    model = build_model(cfg)
    with torch.no_grad():
        model.prompter.gamma_v.fill_(float("nan"))
    before = model.prompts.p.detach().clone()
    with pytest.raises(NonFiniteLossError, match=r"sup_s=nan") as info:
        train_step(model, make_optimizer(model, cfg), micro_batch(cfg), cfg)
    assert "total" in info.value.terms
    assert torch.equal(model.prompts.p.detach(), before)


# -- multi-source and domain generalization -----------------------------------


def _mirror(batch: StepBatch) -> StepBatch:
    return StepBatch(
        [batch.source_names[0], batch.source_names[0] + "'"],
        batch.source_weak * 2,
        batch.source_strong * 2,
        batch.source_labels * 2,
        batch.target_name,
        batch.target_weak,
        batch.target_strong,
        batch.target_pseudo,
    )


def test_duplicated_source_matches_doubled_uda_terms():
    cfg = tiny_run_config()
    model = build_model(cfg)
    uda_batch = micro_batch(cfg, size=5)
    uda = compute_losses(model, uda_batch, cfg).as_floats()
    msda_cfg = tiny_run_config(mode="msda")
    msda = compute_losses(model, _mirror(uda_batch), msda_cfg).as_floats()
    name = uda_batch.source_names[0]
    for term in ("sup_s", "sc_s"):
        assert msda[f"{term}[{name}]"] == pytest.approx(uda[term], abs=1e-12)
        assert msda[term] == pytest.approx(2 * uda[term], abs=1e-12)
    assert msda[f"idc[{name}]"] == pytest.approx(uda["idc_s"], abs=1e-12)
    assert msda["idc_s"] == pytest.approx(2 * uda["idc_s"], abs=1e-12)
    for term in ("sup_t", "sc_t", "idc_t", "im"):
        assert msda[term] == pytest.approx(uda[term], abs=1e-12)


def test_idc_provenance_never_mixes_domains():
    cfg = tiny_msda_config()
    batch = micro_batch(cfg, size=4)
    out = compute_losses(build_model(cfg), batch, cfg)
    assert out.idc_provenance == [("src0", 4), ("src1", 4), ("src2", 4), ("target", 4)]


def test_msda_three_sources_reports_per_domain_breakdown():
    result = train_msda(tiny_msda_config())
    losses = result.history[-1]["losses"]
    for name in ("src0", "src1", "src2"):
        assert {f"sup_s[{name}]", f"sc_s[{name}]", f"idc[{name}]"} <= set(losses)
    total = sum(losses[f"sup_s[src{i}]"] for i in range(3))
    assert losses["sup_s"] == pytest.approx(total, rel=1e-9)


def test_msda_needs_two_sources():
    cfg = tiny_msda_config(n_sources=1)
    with pytest.raises(ConfigError, match="msda"):
        train_msda(cfg)


def test_dg_has_no_target_terms_and_never_reads_unseen():
    result = train_dg(tiny_dg_config())
    for rec in result.history:
        assert not any(k in rec["losses"] for k in ("sup_t", "sc_t", "idc_t", "im"))
        assert "target_acc" not in rec
    assert result.final["unseen_reads_during_training"] == 0
    assert 0.0 <= result.final["unseen_acc"] <= 1.0


def test_dg_rejects_target_data_in_training_path():
    cfg = tiny_dg_config()
    data = generate(cfg.data)
    data.target = generate(tiny_run_config().data).target
    with pytest.raises(AssertionError, match="target"):
        train(cfg, data=data)


def test_dg_config_forbids_target():
    cfg = tiny_dg_config()
    cfg.data.target = cfg.data.unseen
    with pytest.raises(ConfigError, match="target"):
        cfg.validate()


def test_guarded_domain_counts_reads():
    data = generate(tiny_dg_config().data)
    g = GuardedDomain(data.unseen)
    assert g.reads == 0
    _ = g.images
    _ = g.labels
    assert g.reads == 2


def test_wrong_mode_wrappers():
    with pytest.raises(ValueError):
        train_msda(tiny_run_config())
    with pytest.raises(ValueError):
        train_dg(tiny_run_config())


# -- the loop -----------------------------------------------------------------


def test_zero_epochs_rejected():
    with pytest.raises(ConfigError, match="epochs"):
        train(tiny_run_config(epochs=0))


def test_metrics_records_and_schedule(tmp_path):
    cfg = tiny_run_config(epochs=3)
    result = train(cfg, run_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / METRICS_FILE).read_text().splitlines()]
    assert lines == result.history
    assert [r["epoch"] for r in lines] == [1, 2, 3]
    assert [r["alpha"] for r in lines] == pytest.approx([0, 1 / 3, 2 / 3])
    assert lines[0]["lr"] == cfg.learning_rate
    assert lines[1]["lr"] < lines[0]["lr"]
    for r in lines:
        assert {"losses", "target_acc", "pl_acceptance", "pl_acc_naive", "pl_acc_ensemble", "gamma_v"} <= set(r)
        assert 0.0 <= r["pl_acceptance"] <= 1.0


def test_first_epoch_pseudo_labels_are_naive(tmp_path):
    rec = train(tiny_run_config(epochs=2)).history[0]
    assert rec["alpha"] == 0.0
    assert rec["pl_acc_ensemble"] == rec["pl_acc_naive"]


def test_identical_runs_give_identical_logs(tmp_path):
    train(tiny_run_config(), run_dir=tmp_path / "a")
    train(tiny_run_config(), run_dir=tmp_path / "b")
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()


def test_two_epoch_run_keeps_encoders_bitwise(tmp_path):
    cfg = tiny_run_config()
    fresh = _encoder_snapshot(build_model(cfg))
    assert _same_state(fresh, train(cfg).model.encoders.state_dict())


def test_resume_reproduces_trajectory_bit_for_bit(tmp_path, monkeypatch):
    cfg = tiny_run_config(epochs=3)
    full = train(cfg, run_dir=tmp_path / "full")

    real_save = T.save_checkpoint
    calls = {"n": 0}

    def flaky(state, path):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        real_save(state, path)

    monkeypatch.setattr(T, "save_checkpoint", flaky)
    part = tmp_path / "part"
    with pytest.raises(CheckpointError, match="after epoch 2"):
        train(cfg, run_dir=part)
    # the partial history was flushed before the failed write
    assert len((part / METRICS_FILE).read_text().splitlines()) == 2
    assert load_checkpoint(part / CHECKPOINT_FILE)["epoch"] == 1

    monkeypatch.setattr(T, "save_checkpoint", real_save)
    resumed = train(cfg, run_dir=part, resume=True)
    assert (part / METRICS_FILE).read_bytes() == (tmp_path / "full" / METRICS_FILE).read_bytes()
    for (n, a), (_, b) in zip(full.model.named_trainable().items(), resumed.model.named_trainable().items()):
        assert torch.equal(a, b), n


def test_resume_rejects_different_config(tmp_path):
    train(tiny_run_config(), run_dir=tmp_path)
    with pytest.raises(ValueError, match="different config"):
        train(tiny_run_config(learning_rate=1e-2), run_dir=tmp_path, resume=True)


def test_checkpoint_restores_model(tmp_path):
    result = train(tiny_run_config(), run_dir=tmp_path)
    payload = load_checkpoint(tmp_path / CHECKPOINT_FILE)
    model = restore_model(payload)
    x = T.to_tensor(generate(tiny_run_config().data).target.images)
    assert torch.equal(model.predict(x), result.model.predict(x))


def test_bad_checkpoint_rejected(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValueError, match="not a run checkpoint"):
        load_checkpoint(tmp_path / "x.pt")


def test_confusion_matrix_counts():
    cm = confusion_matrix(torch.tensor([0, 1, 1, 2]), [0, 1, 2, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]


# -- precomputed embeddings -------------------------------------------------------


def test_embedding_round_trip_gives_identical_trajectory(tmp_path):
    cfg = tiny_run_config(epochs=3)
    model = build_model(cfg)
    data = generate(cfg.data)
    src = data.sources[0]
    emb = encode_domains(
        model, [(src.name, src.images, src.labels), ("target", data.target.images, -np.ones(len(data.target)))]
    )
    export_embeddings(tmp_path / "e.npz", emb)
    back = ingest_embeddings(tmp_path / "e.npz", expected={"D": cfg.encoder.joint_dim})
    p1, h1 = train_on_embeddings(emb, cfg)
    p2, h2 = train_on_embeddings(back, cfg)
    assert h1 == h2
    assert _same_state(p1.state_dict(), p2.state_dict())
    assert not p1.gamma_v.detach().equal(torch.tensor(cfg.prompter.gamma_v_init, dtype=torch.float64))


def test_embedding_mode_trains_only_prompter():
    cfg = tiny_run_config(epochs=1)
    model = build_model(cfg)
    data = generate(cfg.data)
    src = data.sources[0]
    emb = encode_domains(model, [(src.name, src.images, src.labels)])
    s_before = emb.s.copy()
    prompter, hist = train_on_embeddings(emb, cfg)
    assert np.array_equal(emb.s, s_before)
    assert len(hist) == 1 and np.isfinite(hist[0]["loss"])
    assert prompter is not model.prompter
