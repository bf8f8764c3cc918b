from pathlib import Path

import pytest

from forgemorph.costmodel import DeviceProfile
from forgemorph.netgraph import chain, parse_network

DATA = Path(__file__).resolve().parents[1] / "src" / "forgemorph" / "data"


@pytest.fixture(scope="session")
def mnist():
    return parse_network(DATA / "mnist_8_16_32.json")


@pytest.fixture(scope="session")
def zynq():
    return DeviceProfile.load("zynq7100")


def conv(lid, filters, kernel=3, padding=0, stride=1):
    return {"id": lid, "kind": "Conv", "filters": filters, "kernel": kernel,
            "stride": stride, "padding": padding}


def pool(lid, kernel=2, kind="MaxPool"):
    return {"id": lid, "kind": kind, "kernel": kernel, "stride": kernel}


def fc(lid, out):
    return {"id": lid, "kind": "FullyConnected", "fc_out": out}


@pytest.fixture(scope="session")
def tiny_two_conv():
    """8x8x1 -> conv(4) -> conv(4) -> FC(10); 16 conv genomes."""
    return chain("tiny", (8, 8, 1), [conv("c1", 4), conv("c2", 4), fc("fc", 10)])


def residual_doc():
    return {
        "name": "res",
        "layers": [
            {"id": "in", "kind": "Input", "in_shape": [8, 8, 4]},
            conv("c0", 4, padding=1),
            conv("c1", 4, padding=1),
            conv("c2", 4, padding=1),
            {"id": "merge", "kind": "ResidualAdd"},
            fc("fc", 10),
            {"id": "out", "kind": "Output"},
        ],
        "connections": [["in", "c0"], ["c0", "c1"], ["c1", "c2"], ["c2", "merge"],
                        ["c0", "merge"], ["merge", "fc"], ["fc", "out"]],
    }
