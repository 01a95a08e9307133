"""Desk-scale victim architectures.

``smallcnn``: VGG-flavoured, three conv-BN-ReLU stages with two max-pools and
a linear head. ``smallres``: ResNet-flavoured stem plus two residual blocks of
the form ``relu(bn2(conv2(relu(bn1(conv1(x)))))) + x``.
"""
import numpy as np

from intriuap.model import build_model

ARCHITECTURES = ("smallcnn", "smallres")


def _conv(rng, cout, cin, k, dtype):
    fan_in = cin * k * k
    return (rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _bn(c, dtype):
    return {
        "gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
        "moving_mean": np.zeros(c, dtype), "moving_var": np.ones(c, dtype),
    }


def _fc(rng, out, inp, dtype):
    return (rng.standard_normal((out, inp)) * np.sqrt(1.0 / inp)).astype(dtype)


def _conv_node(nid, src, rng, cout, cin, dtype, k=3, pad=1, stride=1, bias=False):
    params = {"weight": _conv(rng, cout, cin, k, dtype)}
    if bias:
        params["bias"] = np.zeros(cout, dtype)
    return dict(id=nid, kind="Conv2d", inputs=[src], params=params,
                attrs={"stride": stride, "padding": {"mode": "zero", "size": pad}})


def smallcnn(input_shape=(1, 28, 28), class_count=10, widths=(16, 32, 32), seed=0,
             dtype=np.float32):
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    w1, w2, w3 = widths
    nodes = [
        _conv_node("conv1", "input", rng, w1, c, dtype),
        dict(id="bn1", kind="BatchNorm", inputs=["conv1"], params=_bn(w1, dtype), attrs={"eps": 1e-5}),
        dict(id="relu1", kind="ReLU", inputs=["bn1"]),
        dict(id="pool1", kind="MaxPool", inputs=["relu1"], attrs={"window": 2, "stride": 2}),
        _conv_node("conv2", "pool1", rng, w2, w1, dtype),
        dict(id="bn2", kind="BatchNorm", inputs=["conv2"], params=_bn(w2, dtype), attrs={"eps": 1e-5}),
        dict(id="relu2", kind="ReLU", inputs=["bn2"]),
        dict(id="pool2", kind="MaxPool", inputs=["relu2"], attrs={"window": 2, "stride": 2}),
        _conv_node("conv3", "pool2", rng, w3, w2, dtype),
        dict(id="bn3", kind="BatchNorm", inputs=["conv3"], params=_bn(w3, dtype), attrs={"eps": 1e-5}),
        dict(id="relu3", kind="ReLU", inputs=["bn3"]),
        dict(id="flatten", kind="Flatten", inputs=["relu3"]),
        dict(id="fc", kind="FullyConnected", inputs=["flatten"],
             params={"weight": _fc(rng, class_count, w3 * (h // 4) * (w // 4), dtype),
                     "bias": np.zeros(class_count, dtype)}),
    ]
    return build_model("smallcnn", nodes, input_shape, class_count,
                       {"architecture": "smallcnn", "init_seed": seed})


def _res_block(prefix, src, rng, ch, dtype):
    return [
        _conv_node(f"{prefix}_conv1", src, rng, ch, ch, dtype),
        dict(id=f"{prefix}_bn1", kind="BatchNorm", inputs=[f"{prefix}_conv1"], params=_bn(ch, dtype),
             attrs={"eps": 1e-5}),
        dict(id=f"{prefix}_relu1", kind="ReLU", inputs=[f"{prefix}_bn1"]),
        _conv_node(f"{prefix}_conv2", f"{prefix}_relu1", rng, ch, ch, dtype),
        dict(id=f"{prefix}_bn2", kind="BatchNorm", inputs=[f"{prefix}_conv2"], params=_bn(ch, dtype),
             attrs={"eps": 1e-5}),
        dict(id=f"{prefix}_relu2", kind="ReLU", inputs=[f"{prefix}_bn2"]),
        dict(id=f"{prefix}_add", kind="ResidualAdd", inputs=[f"{prefix}_relu2", src]),
    ]


def smallres(input_shape=(1, 28, 28), class_count=10, width=8, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    nodes = [
        _conv_node("stem_conv", "input", rng, width, c, dtype),
        dict(id="stem_bn", kind="BatchNorm", inputs=["stem_conv"], params=_bn(width, dtype),
             attrs={"eps": 1e-5}),
        dict(id="stem_relu", kind="ReLU", inputs=["stem_bn"]),
        dict(id="pool1", kind="MaxPool", inputs=["stem_relu"], attrs={"window": 2, "stride": 2}),
    ]
    nodes += _res_block("block1", "pool1", rng, width, dtype)
    nodes.append(dict(id="pool2", kind="MaxPool", inputs=["block1_add"], attrs={"window": 2, "stride": 2}))
    nodes += _res_block("block2", "pool2", rng, width, dtype)
    nodes += [
        dict(id="flatten", kind="Flatten", inputs=["block2_add"]),
        dict(id="fc", kind="FullyConnected", inputs=["flatten"],
             params={"weight": _fc(rng, class_count, width * (h // 4) * (w // 4), dtype),
                     "bias": np.zeros(class_count, dtype)}),
    ]
    return build_model("smallres", nodes, input_shape, class_count,
                       {"architecture": "smallres", "init_seed": seed})


def build(arch, **kw):
    if arch == "smallcnn":
        return smallcnn(**kw)
    if arch == "smallres":
        return smallres(**kw)
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
