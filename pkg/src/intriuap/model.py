"""Model graphs made of linear layers and 1-Lipschitz nonlinearities.

A :class:`ModelGraph` is an immutable, topologically ordered list of
:class:`LayerNode`. The graph input is referenced by the reserved id
``"input"``; the last node is the output and must produce ``class_count``
logits.
"""
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from intriuap import ntsr, ops
from intriuap.autodiff import Var, as_var

LINEAR_KINDS = ("Conv2d", "BatchNorm", "FullyConnected")
LIPSCHITZ_ONE_KINDS = ("ReLU", "MaxPool", "AvgPool", "ResidualAdd", "Concat", "Flatten")
KNOWN_KINDS = LINEAR_KINDS + LIPSCHITZ_ONE_KINDS
MULTI_INPUT_KINDS = ("ResidualAdd", "Concat")
MANIFEST_FORMAT = "intriuap-model/1"

_PARAM_NAMES = {
    "Conv2d": ("weight", "bias"),
    "FullyConnected": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta", "moving_mean", "moving_var"),
}
_REQUIRED_PARAMS = {
    "Conv2d": ("weight",),
    "FullyConnected": ("weight",),
    "BatchNorm": ("gamma", "beta", "moving_mean", "moving_var"),
}


class ModelError(ValueError):
    pass


class MissingBlobError(ModelError):
    pass


class ShapeMismatchError(ModelError):
    pass


class CycleError(ModelError):
    pass


class L1LOSViolation(ModelError):
    pass


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: tuple
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    in_shapes: tuple = ()
    out_shape: tuple = ()

    @property
    def in_shape(self):
        return self.in_shapes[0]

    @property
    def stride(self):
        return ops._pair(self.attrs.get("stride", 1))

    @property
    def padding(self):
        pad = self.attrs.get("padding", {"mode": "zero", "size": 0})
        ph, pw = ops._pair(pad.get("size", 0))
        return ops.Padding(pad.get("mode", "zero"), ph, pw)

    @property
    def window(self):
        return ops._pair(self.attrs.get("window", 2))

    @property
    def pool_stride(self):
        return ops._pair(self.attrs.get("stride", self.attrs.get("window", 2)))

    @property
    def eps(self):
        return float(self.attrs.get("eps", 1e-5))


def _infer_shape(kind, attrs, params, in_shapes, node_id):
    def fail(msg):
        raise ShapeMismatchError(f"node {node_id!r} ({kind}): {msg}")

    s = in_shapes[0]
    if kind == "Conv2d":
        w = params["weight"]
        if len(s) != 3 or w.ndim != 4:
            fail(f"needs (C,H,W) input and OIHW weight, got {s} and {w.shape}")
        if w.shape[1] != s[0]:
            fail(f"weight expects {w.shape[1]} input channels, input has {s[0]}")
        if "bias" in params and params["bias"].shape != (w.shape[0],):
            fail(f"bias shape {params['bias'].shape} != ({w.shape[0]},)")
        node = LayerNode(node_id, kind, (), params, attrs)
        try:
            oh, ow = ops.conv_output_hw(s[1], s[2], w.shape[2], w.shape[3], node.stride, node.padding)
        except ops.DimensionError as e:
            fail(str(e))
        return (w.shape[0], oh, ow)
    if kind == "BatchNorm":
        for name in _PARAM_NAMES[kind]:
            if params[name].shape != (s[0],):
                fail(f"{name} shape {params[name].shape} != ({s[0]},)")
        if np.any(params["moving_var"] < 0):
            fail("negative moving variance")
        return s
    if kind == "FullyConnected":
        w = params["weight"]
        if len(s) != 1 or w.ndim != 2 or w.shape[1] != s[0]:
            fail(f"weight {w.shape} incompatible with input {s}")
        if "bias" in params and params["bias"].shape != (w.shape[0],):
            fail(f"bias shape {params['bias'].shape} != ({w.shape[0]},)")
        return (w.shape[0],)
    if kind == "ReLU":
        return s
    if kind == "Flatten":
        return (int(np.prod(s)),)
    if kind in ("MaxPool", "AvgPool"):
        node = LayerNode(node_id, kind, (), params, attrs)
        (kh, kw), (sh, sw) = node.window, node.pool_stride
        if len(s) != 3 or kh > s[1] or kw > s[2]:
            fail(f"window {kh}x{kw} larger than input {s}")
        return (s[0], (s[1] - kh) // sh + 1, (s[2] - kw) // sw + 1)
    if kind == "ResidualAdd":
        for t in in_shapes[1:]:
            if t != s:
                fail(f"branch shapes differ: {in_shapes}")
        return s
    if kind == "Concat":
        for t in in_shapes[1:]:
            if len(t) != len(s) or t[1:] != s[1:]:
                fail(f"branch shapes incompatible: {in_shapes}")
        return (sum(t[0] for t in in_shapes),) + tuple(s[1:])
    raise L1LOSViolation(f"node {node_id!r}: kind {kind!r} is not a supported L1LOS layer")


@dataclass(frozen=True)
class ModelGraph:
    name: str
    nodes: tuple
    input_shape: tuple
    class_count: int
    linear_layer_order: tuple
    metadata: dict = field(default_factory=dict)

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def dtype(self):
        for n in self.nodes:
            for p in n.params.values():
                return p.dtype
        return np.dtype(np.float64)

    def astype(self, dtype):
        dtype = np.dtype(dtype)
        nodes = tuple(
            replace(n, params={k: v.astype(dtype) for k, v in n.params.items()})
            for n in self.nodes)
        return replace(self, nodes=nodes)

    def with_params(self, params):
        """Copy with parameters replaced from ``{(node_id, name): array}``."""
        nodes = []
        for n in self.nodes:
            new = dict(n.params)
            for name in n.params:
                if (n.id, name) in params:
                    new[name] = np.asarray(params[(n.id, name)])
            nodes.append(replace(n, params=new))
        return build_model(self.name, [
            dict(id=n.id, kind=n.kind, inputs=n.inputs, params=n.params, attrs=n.attrs)
            for n in nodes], self.input_shape, self.class_count, self.metadata)

    def param_items(self):
        for n in self.nodes:
            for name in _PARAM_NAMES.get(n.kind, ()):
                if name in n.params:
                    yield (n.id, name), n.params[name]


def build_model(name, node_specs, input_shape, class_count, metadata=None, check_l1los=True):
    """Validate node specs and resolve geometry.

    Each spec is a mapping with ``id``, ``kind``, ``inputs`` and optional
    ``params``/``attrs``. Raises a :class:`ModelError` subclass on failure.
    """
    input_shape = tuple(int(d) for d in input_shape)
    shapes = {"input": input_shape}
    consumers = {"input": 0}
    nodes = []
    all_ids = [s["id"] for s in node_specs]
    if len(set(all_ids)) != len(all_ids) or "input" in all_ids:
        raise ModelError("node ids must be unique and must not be 'input'")
    for spec in node_specs:
        nid, kind = spec["id"], spec["kind"]
        inputs = tuple(spec.get("inputs", ()))
        if kind not in KNOWN_KINDS:
            if check_l1los:
                raise L1LOSViolation(
                    f"node {nid!r}: kind {kind!r} is not in the certified 1-Lipschitz set")
            nodes.append(LayerNode(nid, kind, inputs, dict(spec.get("params", {})),
                                   dict(spec.get("attrs", {}))))
            shapes[nid] = shapes.get(inputs[0], ()) if inputs else ()
            consumers[nid] = 0
            for i in inputs:
                consumers[i] = consumers.get(i, 0) + 1
            continue
        if kind in MULTI_INPUT_KINDS:
            if len(inputs) < 2:
                raise ModelError(f"node {nid!r}: {kind} needs at least two inputs")
        elif len(inputs) != 1:
            raise ModelError(f"node {nid!r}: {kind} takes exactly one input")
        for i in inputs:
            if i not in shapes:
                if i in all_ids:
                    raise CycleError(f"node {nid!r} consumes {i!r} before it is produced")
                raise ModelError(f"node {nid!r} references unknown input {i!r}")
        params = {k: np.asarray(v) for k, v in dict(spec.get("params", {})).items()}
        for pname in _REQUIRED_PARAMS.get(kind, ()):
            if pname not in params:
                raise ModelError(f"node {nid!r}: missing parameter {pname!r}")
        attrs = dict(spec.get("attrs", {}))
        in_shapes = tuple(shapes[i] for i in inputs)
        out_shape = _infer_shape(kind, attrs, params, in_shapes, nid)
        nodes.append(LayerNode(nid, kind, inputs, params, attrs, in_shapes, tuple(out_shape)))
        shapes[nid] = tuple(out_shape)
        consumers[nid] = 0
        for i in inputs:
            consumers[i] += 1
    if not nodes:
        raise ModelError("model has no nodes")
    sinks = [n.id for n in nodes if consumers[n.id] == 0]
    if sinks != [nodes[-1].id]:
        raise ModelError(f"model must have a single output (the last node), sinks: {sinks}")
    if consumers["input"] == 0:
        raise ModelError("model never consumes its input")
    if check_l1los and nodes[-1].out_shape != (int(class_count),):
        raise ShapeMismatchError(
            f"output shape {nodes[-1].out_shape} != ({class_count},) logits")
    order = tuple(n.id for n in nodes if n.kind in LINEAR_KINDS)
    return ModelGraph(name, tuple(nodes), input_shape, int(class_count), order,
                      dict(metadata or {}))


# -- forward -------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Var
    snapshots: list
    bn_stats: dict = field(default_factory=dict)


def _param(pvars, node, name):
    if pvars is not None and (node.id, name) in pvars:
        return pvars[(node.id, name)]
    return node.params.get(name)


def apply_node(node, args, pvars=None, bn_train=False, bn_stats=None):
    """Run a single node on its input Vars."""
    k = node.kind
    x = args[0]
    if k == "Conv2d":
        return ops.conv2d(x, _param(pvars, node, "weight"), _param(pvars, node, "bias"),
                          node.stride, node.padding)
    if k == "BatchNorm":
        g, b = _param(pvars, node, "gamma"), _param(pvars, node, "beta")
        if bn_train:
            out, mu, var = ops.batchnorm_train(x, g, b, node.eps)
            if bn_stats is not None:
                bn_stats[node.id] = (mu, var)
            return out
        return ops.batchnorm_inference(x, g, b, node.params["moving_mean"],
                                       node.params["moving_var"], node.eps)
    if k == "FullyConnected":
        return ops.fully_connected(x, _param(pvars, node, "weight"), _param(pvars, node, "bias"))
    if k == "ReLU":
        return ops.relu(x)
    if k == "MaxPool":
        return ops.maxpool2d(x, node.window, node.pool_stride)
    if k == "AvgPool":
        return ops.avgpool2d(x, node.window, node.pool_stride)
    if k == "Flatten":
        return ops.flatten(x)
    if k == "ResidualAdd":
        return ops.residual_add(*args)
    if k == "Concat":
        return ops.concat_channels(*args)
    raise L1LOSViolation(f"cannot execute node kind {k!r}")


def forward(model, x, pvars=None, bn_train=False, upto=None):
    """Run the model on a batch ``x`` of shape ``(N, *input_shape)``.

    Returns logits plus the input of every linear layer (``snapshots``),
    aligned with ``model.linear_layer_order``. ``upto`` stops after the given
    number of linear layers have been snapshotted (logits are then None).
    """
    x = as_var(x)
    if tuple(x.value.shape[1:]) != model.input_shape:
        raise ShapeMismatchError(
            f"input shape {tuple(x.value.shape[1:])} does not match model input {model.input_shape}")
    vals = {"input": x}
    snaps = []
    bn_stats = {}
    remaining = {}
    for n in model.nodes:
        for i in n.inputs:
            remaining[i] = remaining.get(i, 0) + 1
    for n in model.nodes:
        args = [vals[i] for i in n.inputs]
        if n.kind in LINEAR_KINDS:
            snaps.append(args[0])
            if upto is not None and len(snaps) >= upto:
                return ForwardResult(None, snaps, bn_stats)
        vals[n.id] = apply_node(n, args, pvars, bn_train, bn_stats)
        for i in n.inputs:
            remaining[i] -= 1
            if remaining[i] == 0:
                del vals[i]
    return ForwardResult(vals[model.nodes[-1].id], snaps, bn_stats)


def predict(model, x, batch_size=256):
    """Logits for a batch of raw arrays, no tape."""
    outs = []
    for s in range(0, len(x), batch_size):
        outs.append(forward(model, x[s:s + batch_size]).logits.value)
    return np.concatenate(outs, axis=0)


# -- L1LOS certification -------------------------------------------------------

@dataclass
class NodeCheck:
    id: str
    kind: str
    passed: bool
    detail: str


@dataclass
class L1LOSReport:
    passed: bool
    nodes: list
    offending_kinds: list


def pool_operator_norm(kind, window, stride, in_shape, dense_cap=4096):
    """Operator (l2) norm bound of a single-channel pooling map.

    For AvgPool the exact norm is computed from the dense matrix when the
    plane has at most ``dense_cap`` pixels; otherwise the Schur bound
    sqrt(max row sum * max column sum) is returned. For MaxPool the Lipschitz
    constant is sqrt of the maximal number of windows covering one pixel.
    """
    (kh, kw), (sh, sw) = window, stride
    h, w = in_shape[-2:]
    overlap = math.ceil(kh / sh) * math.ceil(kw / sw)
    if kind == "MaxPool":
        return math.sqrt(overlap)
    if h * w <= dense_cap:
        eye = np.eye(h * w).reshape(h * w, 1, h, w)
        mat = ops.avgpool2d(eye, window, stride).value.reshape(h * w, -1).T
        return float(np.linalg.norm(mat, 2))
    return math.sqrt(overlap / (kh * kw))


def validate_l1los(model):
    """Certify that every nonlinear node is 1-Lipschitz (l2)."""
    checks = []
    for n in model.nodes:
        if n.kind in LINEAR_KINDS:
            checks.append(NodeCheck(n.id, n.kind, True, "linear"))
        elif n.kind in ("ReLU", "Flatten"):
            checks.append(NodeCheck(n.id, n.kind, True, "1-Lipschitz"))
        elif n.kind == "ResidualAdd":
            checks.append(NodeCheck(n.id, n.kind, True, "sum of branches (bound adds)"))
        elif n.kind == "Concat":
            checks.append(NodeCheck(n.id, n.kind, True, "norm-preserving rearrangement"))
        elif n.kind in ("MaxPool", "AvgPool"):
            norm = pool_operator_norm(n.kind, n.window, n.pool_stride, n.in_shape)
            ok = norm <= 1 + 1e-12
            checks.append(NodeCheck(n.id, n.kind, ok, f"operator norm {norm:.6g}"))
        else:
            checks.append(NodeCheck(n.id, n.kind, False, "kind outside the certified set"))
    bad = sorted({c.kind for c in checks if not c.passed})
    return L1LOSReport(not bad, checks, bad)


# -- manifest I/O --------------------------------------------------------------

def _blob_name(node_id, pname):
    return f"{node_id}.{pname}.ntsr"


def save_model(model, manifest_path):
    """Write a JSON manifest plus one NTSR1 blob per parameter."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(root, exist_ok=True)
    nodes = []
    for n in model.nodes:
        entry = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs)}
        if n.attrs:
            entry["attrs"] = n.attrs
        if n.params:
            entry["params"] = {}
            for pname in _PARAM_NAMES.get(n.kind, tuple(n.params)):
                if pname not in n.params:
                    continue
                arr = n.params[pname]
                blob = _blob_name(n.id, pname)
                ntsr.save(os.path.join(root, blob), arr)
                entry["params"][pname] = {"blob": blob, "shape": list(arr.shape)}
        nodes.append(entry)
    doc = {
        "format": MANIFEST_FORMAT,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "nodes": nodes,
    }
    if model.metadata:
        doc["metadata"] = model.metadata
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(manifest_path, dtype=None):
    """Load and validate a manifest; optionally cast parameters to ``dtype``."""
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ModelError(f"manifest is not valid JSON: {e}") from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise ModelError(f"unsupported manifest format {doc.get('format')!r}")
    specs = []
    for entry in doc["nodes"]:
        params = {}
        for pname, ref in entry.get("params", {}).items():
            path = os.path.join(root, ref["blob"])
            if not os.path.exists(path):
                raise MissingBlobError(f"node {entry['id']!r}: missing blob {ref['blob']}")
            arr = ntsr.load(path)
            if list(arr.shape) != list(ref["shape"]):
                raise ShapeMismatchError(
                    f"node {entry['id']!r}: blob {ref['blob']} has shape {list(arr.shape)}, "
                    f"manifest declares {ref['shape']}")
            params[pname] = arr if dtype is None else arr.astype(dtype)
        specs.append(dict(id=entry["id"], kind=entry["kind"], inputs=entry.get("inputs", []),
                          params=params, attrs=entry.get("attrs", {})))
    return build_model(doc.get("name", os.path.basename(root)), specs, doc["input_shape"],
                       doc["class_count"], doc.get("metadata"))
