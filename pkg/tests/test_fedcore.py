import numpy as np
import pytest

from fettl.config import validate_config
from fettl.errors import AggregationError, ConfigError, ContractError, NumericError
from fettl.fedcore import (
    ClientState, RoundMessage, Transcript, audit_transcript, execute_run,
    fedavg_aggregate, fettl_local_update, initial_task_learning, mean_aggregate,
    run_strategy, template_init_study, train_centralized, train_harmonizer_federated,
    _decoder_local_steps, _template_bytes, _template_from_bytes,
)
from fettl.harmonizer import Template
from fettl.models import Decoder, Encoder, encode, pretrain_encoder
from fettl.params import ParamSet
from fettl.seeding import derive_rng
from fettl.synthdata import gen_pretrain_pool, gen_seg_site, identity_style, random_site_style
from fettl.tensor import Tensor

from helpers import finite_diff_probe, max_rel_err


def _ps(values: dict) -> ParamSet:
    return ParamSet([(k, Tensor(np.asarray(v, dtype=float))) for k, v in values.items()])


# -- aggregation ----------------------------------------------------------------

def test_fedavg_single_client_identity():
    ps = _ps({"w": [1.0, 2.0], "b": [0.5]})
    out = fedavg_aggregate([(ps, 7)])
    assert out.to_bytes() == ps.to_bytes()


def test_fedavg_hand_weighted_mean():
    out = fedavg_aggregate([(_ps({"w": [2.0]}), 1), (_ps({"w": [4.0]}), 3)])
    assert out["w"].data[0] == 3.5  # exact: (1*2 + 3*4) / 4


def test_fedavg_identical_uploads_fixed_point():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=5)
    ups = [(_ps({"w": vals}), c) for c in (3, 9, 1)]
    out = fedavg_aggregate(ups)
    assert np.array_equal(out["w"].data, vals)


def test_fedavg_errors():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    with pytest.raises(AggregationError, match="name"):
        fedavg_aggregate([(_ps({"w": [1.0]}), 1), (_ps({"v": [1.0]}), 1)])
    with pytest.raises(AggregationError, match="'w'"):
        fedavg_aggregate([(_ps({"w": [1.0]}), 1), (_ps({"w": [1.0, 2.0]}), 1)])
    with pytest.raises(AggregationError):
        fedavg_aggregate([(_ps({"w": [1.0]}), 0)])


def test_mean_aggregate_templates_midpoint():
    t = np.random.default_rng(1).normal(size=(4, 2, 2))
    out = mean_aggregate([Template(Tensor(t)), Template(Tensor(3.0 * t))])
    assert np.allclose(out.features.data, 2.0 * t, rtol=1e-12)


def test_mean_aggregate_identical_fixed_point():
    t = np.random.default_rng(2).normal(size=(4, 2, 2))
    out = mean_aggregate([Template(Tensor(t)) for _ in range(5)])
    assert np.array_equal(out.features.data, t)


def test_mean_differs_from_weighted_with_unequal_counts():
    a, b = _ps({"w": [2.0]}), _ps({"w": [4.0]})
    weighted = fedavg_aggregate([(a, 1), (b, 3)])
    unweighted = mean_aggregate([a, b])
    assert weighted["w"].data[0] == 3.5
    assert unweighted["w"].data[0] == 3.0
    equal_counts = fedavg_aggregate([(a, 5), (b, 5)])
    assert equal_counts["w"].data[0] == unweighted["w"].data[0]


def test_mean_aggregate_permutation_invariance():
    rng = np.random.default_rng(3)
    sets = [_ps({"w": rng.normal(size=6), "b": rng.normal(size=2)}) for _ in range(6)]
    base = mean_aggregate(sets)
    for pseed in range(50):
        perm = np.random.default_rng(pseed).permutation(len(sets))
        out = mean_aggregate([sets[i] for i in perm])
        assert np.allclose(out["w"].data, base["w"].data, rtol=0, atol=1e-12)
        assert np.allclose(out["b"].data, base["b"].data, rtol=0, atol=1e-12)


# -- transcript and audit ----------------------------------------------------------

def test_transcript_audit_happy_path():
    ps = _ps({"w": [1.0, 2.0]})
    tr = Transcript()
    tr.record(RoundMessage("broadcast", 0, "A", "model", ps.to_bytes()))
    tr.record(RoundMessage("broadcast", 0, "B", "model", ps.to_bytes()))
    tr.record(RoundMessage("upload", 0, "A", "model", ps.to_bytes(), 5))
    audit_transcript(tr.entries, {"w": (2,)})


def test_transcript_audit_rejects_undeclared_and_misshaped():
    ps = _ps({"w": [1.0, 2.0]})
    tr = Transcript()
    tr.record(RoundMessage("upload", 0, "A", "model", ps.to_bytes(), 5))
    with pytest.raises(ContractError, match="undeclared"):
        audit_transcript(tr.entries, {"v": (2,)})
    with pytest.raises(ContractError, match="shape"):
        audit_transcript(tr.entries, {"w": (3,)})


def test_transcript_audit_rejects_divergent_broadcast():
    tr = Transcript()
    tr.record(RoundMessage("broadcast", 0, "A", "model", _ps({"w": [1.0]}).to_bytes()))
    tr.record(RoundMessage("broadcast", 0, "B", "model", _ps({"w": [2.0]}).to_bytes()))
    with pytest.raises(ContractError, match="byte-identical"):
        audit_transcript(tr.entries, {"w": (1,)})


# -- shared fixtures -----------------------------------------------------------------

def _tiny_cfg(**overrides):
    base = {
        "task": "segmentation",
        "strategy": "fettl",
        "image_size": 16,
        "sites": [{"site_id": "A", "n": 8}, {"site_id": "B", "n": 6}],
        "rounds": 2, "local_iters": 3, "batch_size": 4,
        "eta": 1e-3, "beta": 1e-3, "seed": 1,
        "pretrain": {"pool_images": 12, "pool_epochs": 4, "rounds": 1,
                     "local_steps": 3, "batch_size": 4},
        "init_task": {"epochs": 1, "lr": 5e-4, "batch_size": 4},
    }
    base.update(overrides)
    return validate_config(base)


@pytest.fixture(scope="module")
def tiny_sites():
    style_a = random_site_style(derive_rng(77, "a"))
    style_b = random_site_style(derive_rng(77, "b"))
    return [gen_seg_site("A", 8, 16, style_a, seed=70),
            gen_seg_site("B", 6, 16, style_b, seed=71)]


@pytest.fixture(scope="module")
def tiny_autoencoder():
    pool = gen_pretrain_pool(12, 16, seed=80)
    return pretrain_encoder(pool, epochs=6, seed=81)


# -- federated harmonizer training -------------------------------------------------------

def test_harmonizer_zero_local_steps_is_noop(tiny_sites, tiny_autoencoder):
    enc, dec0 = tiny_autoencoder
    before = dec0.param_set().digest()
    dec, _ = train_harmonizer_federated(tiny_sites, enc, dec0, rounds=3,
                                        local_steps=0, seed=5)
    assert dec.param_set().digest() == before


def test_harmonizer_single_client_matches_direct_training(tiny_sites, tiny_autoencoder):
    enc, dec0 = tiny_autoencoder
    fed, _ = train_harmonizer_federated(tiny_sites[:1], enc, dec0, rounds=2,
                                        local_steps=3, batch_size=4, lr=1e-3, seed=9)
    # direct training: same local routine, same streams, no aggregation
    direct = Decoder(np.random.default_rng(0))
    direct.load_param_set(dec0.param_set())
    train_imgs = [tiny_sites[0].images[i] for i in tiny_sites[0].split_indices("train")]
    for rnd in range(2):
        rng = derive_rng(9, "harmonizer", rnd, tiny_sites[0].site_id)
        _decoder_local_steps(direct, enc, train_imgs, rng, 3, 4, 1e-3, False)
    assert fed.param_set().to_bytes() == direct.param_set().to_bytes()


def test_harmonizer_improves_pooled_validation(tiny_sites, tiny_autoencoder):
    enc, dec0 = tiny_autoencoder
    _, history = train_harmonizer_federated(tiny_sites, enc, dec0, rounds=10,
                                            local_steps=5, batch_size=4,
                                            lr=1e-3, seed=11)
    assert history[-1] < history[0]


def test_harmonizer_requires_frozen_encoder(tiny_sites):
    enc = Encoder(np.random.default_rng(0))
    dec = Decoder(np.random.default_rng(1))
    with pytest.raises(ContractError):
        train_harmonizer_federated(tiny_sites, enc, dec, rounds=1)


# -- initial task learning ------------------------------------------------------------------

def test_initial_task_learning_contract(tiny_sites, tiny_autoencoder):
    enc, _ = tiny_autoencoder
    cfg = _tiny_cfg()
    params, template = initial_task_learning(tiny_sites[0], enc, cfg, seed=3)
    feats = encode(enc, tiny_sites[0].images[0])
    assert template.features.shape == feats.shape
    params2, template2 = initial_task_learning(tiny_sites[0], enc, cfg, seed=3)
    assert params.digest() == params2.digest()
    assert np.array_equal(template.features.data, template2.features.data)


def test_initial_task_learning_improves_train_dice(tiny_autoencoder):
    from fettl.fedcore import _build_model
    from fettl.metrics import dice as dice_metric
    from fettl.tensor import no_grad

    enc, _ = tiny_autoencoder
    site = gen_seg_site("big", 16, 16, identity_style(), seed=90)
    cfg = _tiny_cfg(init_task={"epochs": 8, "lr": 1e-3, "batch_size": 4})

    def train_dice(params):
        model = _build_model("segmentation", "instance", (0, "probe_eval"))
        model.load_param_set(params)
        vals = []
        with no_grad():
            for i in site.split_indices("train"):
                pred = model.forward(site.images[i], train=False)
                vals.append(dice_metric(pred.data, site.labels[i].data))
        return float(np.mean(vals))

    untrained = _build_model("segmentation", "instance", (3, "init_task_model")).param_set()
    trained, _ = initial_task_learning(site, enc, cfg, seed=3)
    assert train_dice(trained) > train_dice(untrained)


# -- fettl local update -----------------------------------------------------------------------

def _local_update_setup(tiny_sites, tiny_autoencoder):
    enc, dec0 = tiny_autoencoder
    cfg = _tiny_cfg(augment=False)
    client = ClientState(site=tiny_sites[0])
    model_params, _ = initial_task_learning(tiny_sites[0], enc, cfg, seed=3)
    feats = encode(enc, tiny_sites[0].images[0])
    template = Template(Tensor(feats.data.copy()))
    return enc, dec0, cfg, client, model_params, template


def test_fettl_local_update_frozen_when_lrs_zero(tiny_sites, tiny_autoencoder):
    enc, dec, cfg, client, params, template = _local_update_setup(tiny_sites, tiny_autoencoder)
    out_params, out_template, metrics = fettl_local_update(
        client, enc, dec, (params, template), iters=2, eta=0.0, beta=0.0, cfg=cfg)
    assert out_params.to_bytes() == params.to_bytes()
    assert np.array_equal(out_template.features.data, template.features.data)
    assert np.isfinite(metrics["mean_loss"])


def test_fettl_local_update_selective_freeze(tiny_sites, tiny_autoencoder):
    enc, dec, cfg, client, params, template = _local_update_setup(tiny_sites, tiny_autoencoder)
    out_params, out_template, _ = fettl_local_update(
        client, enc, dec, (params, template), iters=2, eta=0.0, beta=1e-3, cfg=cfg)
    assert np.array_equal(out_template.features.data, template.features.data)
    assert out_params.to_bytes() != params.to_bytes()


def test_fettl_local_update_moves_template(tiny_sites, tiny_autoencoder):
    enc, dec, cfg, client, params, template = _local_update_setup(tiny_sites, tiny_autoencoder)
    out_params, out_template, _ = fettl_local_update(
        client, enc, dec, (params, template), iters=2, eta=1e-3, beta=0.0, cfg=cfg)
    assert not np.array_equal(out_template.features.data, template.features.data)
    assert out_params.to_bytes() == params.to_bytes()


def test_fettl_local_update_keeps_enc_dec_frozen(tiny_sites, tiny_autoencoder):
    enc, dec, cfg, client, params, template = _local_update_setup(tiny_sites, tiny_autoencoder)
    enc_digest = enc.param_set().digest()
    dec_digest = dec.param_set().digest()
    fettl_local_update(client, enc, dec, (params, template), iters=2,
                       eta=1e-3, beta=1e-3, cfg=cfg)
    assert enc.param_set().digest() == enc_digest
    assert dec.param_set().digest() == dec_digest


def test_joint_loss_template_gradient_matches_fd(tiny_sites, tiny_autoencoder):
    # analytic gradient of the full local loss wrt template entries
    from fettl.fedcore import _build_model
    from fettl.harmonizer import harmonize_batch
    from fettl.models import soft_dice_loss
    from fettl.tensor import backward, stack

    enc, dec, cfg, client, params, template = _local_update_setup(tiny_sites, tiny_autoencoder)
    model = _build_model("segmentation", "instance", (0, "fd_model"))
    model.load_param_set(params)
    site = client.site
    idx = site.split_indices("train")[:3]
    imgs = [site.images[i] for i in idx]
    masks = stack([site.labels[i] for i in idx])

    def loss_of(tdata):
        t = Template(Tensor(tdata))
        xb = harmonize_batch(enc, dec, imgs, t, epsilon=cfg.epsilon, train=True)
        return soft_dice_loss(model.forward(xb, train=True), masks).item()

    t0 = template.features.data.copy()
    tt = Tensor(t0.copy(), requires_grad=True)
    xb = harmonize_batch(enc, dec, imgs, Template(tt), epsilon=cfg.epsilon, train=True)
    loss = soft_dice_loss(model.forward(xb, train=True), masks)
    grads = backward(loss)
    analytic = grads[tt.tid].reshape(-1)
    idxs = np.random.default_rng(5).choice(t0.size, size=8, replace=False)
    fd = finite_diff_probe(loss_of, t0.copy(), idxs)
    assert max_rel_err(analytic[idxs], fd) <= 1e-3


def test_non_finite_loss_aborts_with_diagnostics(tiny_sites, tiny_autoencoder):
    enc, dec, cfg, client, params, template = _local_update_setup(tiny_sites, tiny_autoencoder)
    poisoned = params.copy()
    # poison the head: upstream NaNs die at the relu mask, the head's do not
    poisoned["seg_head.w"].data.reshape(-1)[0] = np.nan
    with pytest.raises(NumericError, match="round"):
        fettl_local_update(client, enc, dec, (poisoned, template), iters=2,
                           eta=1e-3, beta=1e-3, cfg=cfg)


# -- full strategy runs -------------------------------------------------------------------------

def test_run_strategy_unknown_strategy():
    with pytest.raises(ConfigError):
        validate_config({"task": "segmentation", "strategy": "fedmagic"})


def test_run_strategy_dataset_task_mismatch(tmp_path):
    from fettl.synthdata import save_dataset_dir

    site = gen_seg_site("A", 6, 16, identity_style(), seed=1)
    save_dataset_dir([site], tmp_path / "d", "segmentation", 16, 1)
    cfg = _tiny_cfg(task="classification", strategy="fedavg",
                    dataset_dir=str(tmp_path / "d"),
                    sites=[{"site_id": "A", "n": 8}])
    with pytest.raises(ConfigError, match="task"):
        execute_run(cfg)


def test_fedprox_mu_zero_bitwise_equals_fedavg():
    a = execute_run(_tiny_cfg(strategy="fedavg"))
    b = execute_run(_tiny_cfg(strategy="fedprox", mu=0.0))
    assert a.best_model == b.best_model
    assert a.report.final_test == b.report.final_test


def test_fedprox_strict_requires_mu():
    cfg = _tiny_cfg(strategy="fedprox", strict=True)
    with pytest.raises(ConfigError, match="mu"):
        execute_run(cfg)


def test_single_client_federated_equals_centralized():
    cfg = _tiny_cfg(strategy="fedavg", sites=[{"site_id": "solo", "n": 10}],
                    rounds=3, local_iters=4)
    fed = execute_run(cfg)
    cen_report, cen_model = train_centralized(cfg)
    assert fed.best_model == cen_model
    assert fed.report.best_round == cen_report.best_round
    fed_rounds = [(r["round"], r["site"], r["split"], r["metric"], r["value"])
                  for r in fed.report.rounds]
    cen_rounds = [(r["round"], r["site"], r["split"], r["metric"], r["value"])
                  for r in cen_report.rounds]
    assert fed_rounds == cen_rounds


def test_run_determinism_bit_identical_reports():
    cfg = _tiny_cfg(strategy="fettl")
    a = run_strategy(cfg)
    b = run_strategy(cfg)
    assert a.to_json() == b.to_json()


def test_parallel_clients_match_sequential():
    cfg = _tiny_cfg(strategy="fedavg")
    seq = execute_run(cfg)
    par = execute_run(cfg.with_overrides(parallel_clients=2))
    assert seq.best_model == par.best_model
    assert seq.report.to_json() == par.report.to_json()


def test_transcript_audit_passes_for_all_message_kinds():
    for strategy in ("fettl", "fedavg", "fedbn", "fettl_local"):
        out = execute_run(_tiny_cfg(strategy=strategy))
        audit_transcript(out.transcript.entries, out.allowed_payload)


def test_fedbn_keeps_norm_state_local():
    out = execute_run(_tiny_cfg(strategy="fedbn"))
    for e in out.transcript.entries:
        names = {r["name"] for r in e["records"]}
        assert not any("norm" in n for n in names)
    norms = {site: extras["norms"] for site, extras in out.best_client_extras.items()}
    assert norms["A"] is not None and norms["B"] is not None
    assert norms["A"] != norms["B"]  # per-site statistics diverged


def test_fettl_local_never_uploads_templates():
    out = execute_run(_tiny_cfg(strategy="fettl_local"))
    for e in out.transcript.entries:
        if e["direction"] == "upload":
            names = {r["name"] for r in e["records"]}
            assert "template" not in names
    temps = {s: extras["template"] for s, extras in out.best_client_extras.items()}
    assert temps["A"] != temps["B"]  # local templates diverged


def test_fettl_uploads_model_plus_template():
    out = execute_run(_tiny_cfg(strategy="fettl"))
    # ignore the harmonizer-pretraining phase (kind "decoder")
    upload_kinds = {e["kind"] for e in out.transcript.entries
                    if e["direction"] == "upload" and e["kind"] != "decoder"}
    assert upload_kinds == {"model+template"}


def test_best_round_checkpoint_rule():
    out = execute_run(_tiny_cfg(strategy="fedavg", rounds=3))
    vals = out.report.round_values("dice", "val")
    pooled_by_round = {r: v["pooled"] for r, v in vals.items()}
    best = max(sorted(pooled_by_round), key=lambda r: pooled_by_round[r])
    assert out.report.best_round == best


def test_template_init_study_modes():
    cfg = _tiny_cfg(strategy="fettl")
    reports = template_init_study(cfg, modes=("encoded_image", "gaussian_noise"))
    default = run_strategy(cfg)
    assert reports["encoded_image"].to_json() == default.to_json()
    assert reports["encoded_image"].final_test != reports["gaussian_noise"].final_test \
        or reports["encoded_image"].rounds != reports["gaussian_noise"].rounds


def test_template_init_study_rejects_non_template_strategy():
    with pytest.raises(ConfigError):
        template_init_study(_tiny_cfg(strategy="fedavg"))


def test_rounds_zero_reports_initial_model():
    out = execute_run(_tiny_cfg(strategy="fedavg", rounds=0))
    assert out.report.best_round == -1
    assert "pooled" in out.report.final_test


def test_classification_track_runs():
    cfg = validate_config({
        "task": "classification",
        "strategy": "fettl",
        "image_size": 16,
        "sites": [{"site_id": "X", "n": 12, "class_balance": 0.5},
                  {"site_id": "Y", "n": 10, "class_balance": 0.5}],
        "rounds": 2, "local_epochs": 1, "batch_size": 4,
        "eta": 1e-3, "beta": 1e-3, "seed": 2,
        "pretrain": {"pool_images": 8, "pool_epochs": 2, "rounds": 1,
                     "local_steps": 2, "batch_size": 4},
        "init_task": {"epochs": 1, "lr": 1e-3, "batch_size": 4},
    })
    report = run_strategy(cfg)
    assert "aupr" in report.final_test["pooled"]
    assert 0.0 <= report.final_test["pooled"]["aupr"] <= 1.0


def test_fedbn_classification_pairing_rejected():
    with pytest.raises(ConfigError):
        validate_config({"task": "classification", "strategy": "fedbn"})


def test_template_serialization_round_trip():
    t = Template(Tensor(np.random.default_rng(0).normal(size=(4, 3, 3))))
    blob = _template_bytes(t)
    back = _template_from_bytes(blob)
    assert np.array_equal(back.features.data, t.features.data)
