import numpy as np
import pytest

from oracles import shape_rules
from weathercnn.errors import ConfigError, FormatError, ShapeError, ValidationError
from weathercnn.events import EventKind
from weathercnn.layers import ConvSpec, FcSpec, PoolSpec
from weathercnn.network import (EvalReport, Network, NetworkConfig, SgdParams, build, evaluate,
                                evaluate_arrays, gradient_check, infer_shapes, load_config, load_model,
                                one_hot_targets, parse_layer_spec, preset_config, save_model, sgd_step,
                                shape_chain, table_config, train)
from weathercnn.numerics import Rng

PRESET_LAYERS = {
    "tc": [("conv", 5, 5, 8), ("pool", 2, 2), ("conv", 5, 5, 16), ("pool", 2, 2), ("fc", 50), ("fc", 2)],
    "wf": [("conv", 5, 5, 8), ("pool", 2, 2), ("conv", 5, 5, 16), ("pool", 2, 2), ("fc", 50), ("fc", 2)],
    "ar": [("conv", 12, 12, 8), ("pool", 3, 3), ("conv", 12, 12, 16), ("pool", 2, 2), ("fc", 200), ("fc", 2)],
}
INPUTS = {"tc": (8, 32, 32), "wf": (3, 27, 60), "ar": (2, 148, 224)}


def tiny_config(c=1, h=8, w=8):
    return table_config(ConvSpec(3, 3, 2), PoolSpec(2, 2), ConvSpec(1, 1, 2), PoolSpec(1, 1), 4, (c, h, w))


class Data:
    def __init__(self, x, y):
        self.patches, self.labels = x, y


def test_preset_layers():
    cfg = preset_config("tc")
    assert cfg.preset == "TropicalCyclone"
    assert cfg.input_dims == (8, 32, 32)
    assert [s for s in cfg.layers if not hasattr(s, "kind")] == [
        ConvSpec(5, 5, 8), PoolSpec(2, 2), ConvSpec(5, 5, 16), PoolSpec(2, 2), FcSpec(50), FcSpec(2)]
    assert preset_config("ar").input_dims == (2, 148, 224)
    assert preset_config(EventKind.WF).preset == "WeatherFront"


@pytest.mark.parametrize("event", ["tc", "wf", "ar"])
def test_shape_chain_matches_rule_oracle(event):
    assert shape_chain(preset_config(event)) == shape_rules(INPUTS[event], PRESET_LAYERS[event])


def test_shape_chain_literals():
    assert shape_chain(preset_config("tc"))[-3:] == [("flatten", 400), 50, 2]
    assert shape_chain(preset_config("ar"))[-3:] == [("flatten", 8160), 200, 2]
    assert shape_chain(preset_config("wf"))[-3:] == [("flatten", 576), 50, 2]
    assert shape_chain(preset_config("wf"))[:4] == [(8, 23, 56), (8, 11, 28), (16, 7, 24), (16, 3, 12)]


def test_infer_shapes_names_bad_layer():
    cfg = table_config(ConvSpec(5, 5, 8), PoolSpec(2, 2), ConvSpec(5, 5, 16), PoolSpec(2, 2), 10, (1, 12, 12))
    with pytest.raises(ConfigError, match="layer 3"):
        infer_shapes(cfg)


def test_infer_shapes_requires_two_unit_logistic_head():
    with pytest.raises(ConfigError):
        infer_shapes(NetworkConfig([parse_layer_spec("fc 3"), parse_layer_spec("logistic")], (1, 2, 2)))
    with pytest.raises(ConfigError):
        infer_shapes(NetworkConfig([parse_layer_spec("fc 2"), parse_layer_spec("relu")], (1, 2, 2)))


def test_parameter_counts():
    # counted from the shape chain: conv (fh*fw*c*k + k), fc (in*out + out)
    tc = (5 * 5 * 8 * 8 + 8) + (5 * 5 * 8 * 16 + 16) + (400 * 50 + 50) + (50 * 2 + 2)
    assert build(preset_config("tc"), Rng(0)).parameter_count == tc == 24976
    wf = (5 * 5 * 3 * 8 + 8) + (5 * 5 * 8 * 16 + 16) + (576 * 50 + 50) + (50 * 2 + 2)
    assert build(preset_config("wf"), Rng(0)).parameter_count == wf
    assert len(build(preset_config("tc"), Rng(0)).learnable_layers) == 4


def test_build_is_deterministic_with_zero_biases():
    a = build(preset_config("tc"), Rng(5))
    b = build(preset_config("tc"), Rng(5))
    for (_, name, x), (_, _, y) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(x, y)
        if name == "bias":
            assert not x.any()


def test_zero_network_outputs_half():
    net = Network.from_config(preset_config("tc"))
    assert net.forward(np.random.default_rng(0).normal(size=(8, 32, 32))).tolist() == [0.5, 0.5]


def test_forward_properties(np_rng):
    net = build(preset_config("wf"), Rng(1))
    x = np_rng.normal(size=(3, 27, 60)) * 50
    p = net.forward(x)
    assert p.shape == (2,)
    assert np.all((p > 0) & (p < 1))
    assert np.array_equal(net.forward(x), p)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((3, 27, 59)))


def test_batch_forward_matches_single(np_rng):
    net = build(preset_config("tc"), Rng(2))
    x = np_rng.normal(size=(5, 8, 32, 32))
    batch = net.predict_proba(x)
    for i in range(5):
        assert np.allclose(batch[i], net.forward(x[i]), rtol=0, atol=1e-14)


def test_one_hot_convention():
    assert one_hot_targets(np.array([1, 0])).tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_config_yaml(tmp_path):
    path = tmp_path / "net.yaml"
    path.write_text("input_dims: [1, 8, 8]\nlayers: [conv 3x3-2, relu, pool 2x2, fc 4, relu, fc 2, logistic]\n")
    cfg = load_config(path)
    assert shape_chain(cfg) == [(2, 6, 6), (2, 3, 3), ("flatten", 18), 4, 2]
    (tmp_path / "p.yaml").write_text("preset: ar\n")
    assert load_config(tmp_path / "p.yaml") == preset_config("ar")


# -- training ------------------------------------------------------------------

def test_sgd_update_rule():
    net = build(tiny_config(), Rng(0))
    params = SgdParams(learning_rate=0.1, weight_decay=0.01, momentum=0.5)
    before = [w.copy() for _, _, w in net.named_parameters()]
    grads = [{k: np.ones_like(v) for k, v in layer.params.items()} for layer in net.layers]
    vel = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
    sgd_step(net, grads, vel, params)
    sgd_step(net, grads, vel, params)
    for (_, name, w), w0 in zip(net.named_parameters(), before):
        wd = 0.01 if name == "weight" else 0.0
        v1 = -0.1 * (1 + wd * w0)
        w1 = w0 + v1
        v2 = 0.5 * v1 - 0.1 * (1 + wd * w1)
        assert np.allclose(w, w1 + v2, rtol=0, atol=1e-15)


def test_pure_decay_scales_weights():
    net = build(tiny_config(), Rng(0))
    params = SgdParams(learning_rate=0.1, weight_decay=0.5, momentum=0.0)
    before = [w.copy() for _, _, w in net.named_parameters()]
    zeros = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
    vel = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
    for _ in range(3):
        sgd_step(net, zeros, vel, params)
    for (_, name, w), w0 in zip(net.named_parameters(), before):
        factor = 0.95 ** 3 if name == "weight" else 1.0
        assert np.allclose(w, w0 * factor, rtol=1e-14, atol=0)


def test_zero_learning_rate_changes_nothing(np_rng):
    net = build(tiny_config(), Rng(0))
    before = save_model(net)
    x = np_rng.normal(size=(12, 1, 8, 8))
    y = np.array([0, 1] * 6)
    log = train(net, Data(x, y), Data(x, y), SgdParams(learning_rate=0.0, epochs=2, batch_size=5))
    assert save_model(net) == before
    assert len(log.records) == 2 and log.steps == 6  # 5 + 5 + 2 per epoch


def test_training_deterministic_and_learns(tc_small):
    from weathercnn.data import normalize

    ds = normalize(tc_small)
    params = SgdParams(learning_rate=0.03, momentum=0.9, batch_size=8, epochs=4, seed=3)
    runs = []
    for _ in range(2):
        net = build(preset_config("tc"), Rng(7))
        log = train(net, ds, ds, params)
        runs.append((log.to_csv(), save_model(net)))
    assert runs[0] == runs[1]
    header, *rows = runs[0][0].strip().splitlines()
    assert header == "epoch,train_loss,train_acc,val_acc"
    losses = [float(r.split(",")[1]) for r in rows]
    assert losses[-1] < losses[0]


def test_train_rejects_mismatched_data():
    net = build(tiny_config(), Rng(0))
    good = Data(np.zeros((2, 1, 8, 8)), np.array([0, 1]))
    with pytest.raises(ValidationError):
        train(net, Data(np.zeros((2, 1, 8, 9)), np.array([0, 1])), good, SgdParams())
    with pytest.raises(ValidationError):
        train(net, Data(np.zeros((0, 1, 8, 8)), np.array([], dtype=int)), good, SgdParams())


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(momentum=1.0), dict(batch_size=0),
                                    dict(weight_decay=-0.1), dict(epochs=0)])
def test_sgd_params_validation(kwargs):
    with pytest.raises(ValidationError):
        SgdParams(**kwargs)


# -- evaluation ----------------------------------------------------------------

def test_eval_report_hand_case():
    # rows = predicted (event, non-event); columns = true label
    rep = EvalReport.from_counts([[3, 0], [1, 4]])
    assert rep.accuracy == 0.875
    assert rep.confusion[:, 0].tolist() == [0.75, 0.25]
    assert rep.confusion[:, 1].tolist() == [0.0, 1.0]
    table = rep.format_table("TropicalCyclone").splitlines()
    assert "Label TropicalCyclone" in table[0] and "Label Non_TropicalCyclone" in table[0]
    assert table[2].strip().startswith("Predict TropicalCyclone")
    assert table[2].split("|")[1].strip() == "0.750"


def test_evaluate_perfect_classifier():
    net = Network.from_config(tiny_config())
    fc2 = net.layers[-2]
    fc1 = net.layers[-4]
    # hidden unit 0 carries the mean pixel; positive mean -> class 0
    fc1.params["weight"][0, :] = 1.0
    net.layers[0].params["weight"][:, 0, 1, 1] = 1.0
    net.layers[3].params["weight"][:, :, 0, 0] = np.eye(2)
    fc2.params["weight"][0, 0] = 1.0
    fc2.params["weight"][1, 0] = -1.0
    fc2.params["bias"][:] = [-0.5, 0.5]
    x = np.concatenate([np.ones((3, 1, 8, 8)), -np.ones((3, 1, 8, 8))])
    rep = evaluate(net, Data(x, np.array([1, 1, 1, 0, 0, 0])))
    assert rep.accuracy == 1.0
    assert np.array_equal(rep.confusion, np.eye(2))


def test_evaluate_columns_sum_to_one(np_rng):
    net = build(preset_config("tc"), Rng(9))
    rep = evaluate_arrays(net, np_rng.normal(size=(10, 8, 32, 32)), np.array([0, 1] * 5))
    assert np.allclose(rep.confusion.sum(axis=0), 1.0, atol=1e-9)
    assert rep.accuracy == np.trace(rep.counts) / 10


# -- gradient check ------------------------------------------------------------

def test_gradient_check_tiny(np_rng):
    net = build(tiny_config(), Rng(3))
    for _, name, w in net.named_parameters():
        if name == "bias":
            w[:] = np_rng.normal(scale=0.1, size=w.shape)
    x = np_rng.normal(size=(1, 8, 8))
    assert gradient_check(net, x, 1, method="direct") < 1e-4
    assert gradient_check(net, x, 0, method="batched") < 1e-4


def test_gradient_check_zero_network_symmetric_input():
    net = Network.from_config(tiny_config())
    err, entries = gradient_check(net, np.ones((1, 8, 8)), 1, details=True)
    assert err < 1e-4
    out_bias = [e for e in entries if e.layer == len(net.layers) - 2 and e.name == "bias"]
    assert out_bias and out_bias[0].max_error < 1e-6


def test_gradient_check_catches_wrong_backward(np_rng):
    net = build(tiny_config(), Rng(3))
    dense = net.layers[-2]
    original = dense.backward

    def broken(grad_out, need_input_grad=True):
        grad_in, grads = original(grad_out, need_input_grad)
        grads["weight"] = grads["weight"] * 1.01
        return grad_in, grads

    dense.backward = broken
    assert gradient_check(net, np_rng.normal(size=(1, 8, 8)), 1) > 1e-3


def test_gradient_check_methods_agree(np_rng):
    net = build(preset_config("tc"), Rng(4))
    x = np_rng.normal(size=(8, 32, 32))
    _, direct = gradient_check(net, x, 1, method="direct", details=True)
    _, batched = gradient_check(net, x, 1, method="batched", details=True)
    for d, b in zip(direct, batched):
        assert (d.layer, d.name) == (b.layer, b.name)
        assert d.max_error < 1e-4 and b.max_error < 1e-4


def test_gradient_check_eps_bounds():
    net = build(tiny_config(), Rng(0))
    with pytest.raises(ValidationError):
        gradient_check(net, np.zeros((1, 8, 8)), 1, eps=1e-2)


# -- model files ---------------------------------------------------------------

def test_model_round_trip(np_rng):
    net = build(preset_config("wf"), Rng(6))
    net.metadata = {"input_stats": [[1.5, 2.0]] * 3}
    blob = save_model(net)
    back = load_model(blob)
    assert save_model(back) == blob
    assert back.metadata == net.metadata
    x = np_rng.normal(size=(3, 27, 60))
    assert np.array_equal(back.forward(x), net.forward(x))


def test_model_header_layout():
    blob = save_model(build(tiny_config(), Rng(0)))
    assert blob[:4] == b"CNNM"
    assert int.from_bytes(blob[4:8], "little") == 1


@pytest.mark.parametrize("mutate", [
    lambda b: b"XNNM" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:30],
])
def test_model_corruption(mutate):
    blob = save_model(build(tiny_config(), Rng(0)))
    with pytest.raises(FormatError):
        load_model(mutate(blob))
