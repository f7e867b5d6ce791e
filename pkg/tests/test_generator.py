import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from refinery.generator import (
    GeneratorUnavailable,
    MutationGenerator,
    Proposal,
    ProposalRequest,
    RemoteGenerator,
    build_prompt,
    validate_proposal,
)
from refinery.hypothesis import ArtifactSnapshot, Candidate, Edit, materialize
from refinery.synthbench import SyntheticGenerator, decode_vector, load_fixture

SRC = ArtifactSnapshot({
    "calc.py": b"def add(a, b):\n    return a - b\n\n\nLIMIT = 10\n",
    "README": b"notes\n",
})


def request(snap=SRC, n=4, seed=0, **kw):
    return ProposalRequest("inc", snap, n=n, seed=seed, **kw)


class TestMutation:
    gen = MutationGenerator(vocabulary=["+", "-", "*"], files=["*.py"])

    def test_same_request_same_proposals(self):
        assert self.gen.propose(request(seed=5)) == self.gen.propose(request(seed=5))

    def test_seed_changes_proposals(self):
        runs = {tuple(p.edits for p in self.gen.propose(request(seed=s))) for s in range(5)}
        assert len(runs) > 1

    def test_proposals_are_distinct_and_valid(self):
        props = self.gen.propose(request(n=6, seed=1))
        assert len(props) == 6
        assert len({p.edits for p in props}) == 6
        for p in props:
            assert validate_proposal(p, SRC).accepted
            assert all(e.target.startswith("calc.py") for e in p.edits)

    def test_token_operator_reaches_the_fix(self):
        gen = MutationGenerator(vocabulary=["+", "-"], operators=["token"])
        (p,) = gen.propose(request(n=1))
        out = materialize(SRC, Candidate.create("b", p.edits))
        assert "return a + b" in out.text("calc.py")

    def test_number_operator(self):
        gen = MutationGenerator(operators=["number"], files=["calc.py"])
        props = gen.propose(request(n=4, seed=2))
        texts = {materialize(SRC, Candidate.create("b", p.edits)).text("calc.py") for p in props}
        assert texts <= {SRC.text("calc.py").replace("10", str(v)) for v in (8, 9, 11, 12)}

    def test_nothing_to_mutate(self):
        gen = MutationGenerator(operators=["token"])
        assert gen.propose(request()) == []


class TestSynthetic:
    space = load_fixture("T4")

    def test_neighbors_then_repeat(self):
        props = SyntheticGenerator(self.space).propose(
            request(self.space.base_snapshot(), n=4, seed=3))
        vecs = [materialize(self.space.base_snapshot(), Candidate.create("b", p.edits))
                for p in props]
        values = [decode_vector(v)[0] for v in vecs]
        assert sorted(values[:3]) == [1, 2, 3]
        assert values[3] == values[0]
        assert all(p.absolute for p in props)

    def test_every_point_reachable(self):
        space = load_fixture("S1")
        gen = SyntheticGenerator(space)
        base = space.base_snapshot()
        start = tuple(space.start)
        seen, queue = {start}, deque([start])
        while queue:
            vec = queue.popleft()
            snap = materialize(base, Candidate.create("b", space.edits_for(vec)))
            for p in gen.propose(request(snap, n=len(space.neighbors(vec)))):
                nxt = decode_vector(materialize(base, Candidate.create("b", p.edits)))
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        assert len(seen) == space.size


class TestValidation:
    def test_empty(self):
        assert validate_proposal(Proposal(()), SRC).reason == "no edits"

    def test_oversized_payload(self):
        p = Proposal((Edit("calc.py@0", "insert", "x" * 100),))
        assert validate_proposal(p, SRC, max_payload=10).reason == "payload"

    def test_bad_target(self):
        p = Proposal((Edit("calc.py@40:41", "replace_region", "x"),))
        assert validate_proposal(p, SRC).reason == "target"


def test_prompt_sections_in_order():
    req = request(bundle="ctx-here", spec_digest="spec-here")
    prompt = build_prompt(req)
    positions = [prompt.index(s) for s in ("spec-here", "ctx-here", "return a - b", "JSON only")]
    assert positions == sorted(positions)
    assert "   1|     return a - b" in prompt


class _Handler(BaseHTTPRequestHandler):
    replies: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        reply = type(self).replies[(len(type(self).seen) - 1) % len(type(self).replies)]
        data = reply.encode() if isinstance(reply, str) else json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.replies, _Handler.seen = [], []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_port}/", _Handler
    srv.shutdown()
    srv.server_close()


GOOD = {"proposals": [{"edits": [{"target": "calc.py@1:2", "kind": "replace_region",
                                  "payload": "    return a + b"}], "rationale": "sign"}]}


class TestRemote:
    def test_one_request_per_proposal(self, server):
        url, handler = server
        handler.replies = [GOOD]
        gen = RemoteGenerator(url, token="sekrit", max_in_flight=2)
        props = gen.propose(request(n=3, spec_digest="d", bundle="b"))
        assert len(props) == 3 and props[0].rationale == "sign"
        assert len(handler.seen) == 3
        body, auth = handler.seen[0]
        assert auth == "Bearer sekrit"
        assert body["n"] == 1 and body["spec_digest"] == "d" and body["context"] == "b"
        assert len({b["seed"] for b, _ in handler.seen}) == 3

    def test_malformed_replies_become_notes(self, server):
        url, handler = server
        handler.replies = ["not json", {"proposals": [{"edits": []}]}]
        gen = RemoteGenerator(url, max_in_flight=1)
        assert gen.propose(request(n=2)) == []
        assert len(gen.notes) == 2

    def test_unreachable_service(self):
        gen = RemoteGenerator("http://127.0.0.1:9/", timeout=2)
        with pytest.raises(GeneratorUnavailable):
            gen.propose(request(n=2))

    def test_endpoint_from_environment(self, monkeypatch):
        monkeypatch.delenv("REFINERY_GENERATOR_URL", raising=False)
        with pytest.raises(ValueError):
            RemoteGenerator()
        monkeypatch.setenv("REFINERY_GENERATOR_URL", "http://example.invalid/")
        assert RemoteGenerator().endpoint == "http://example.invalid/"


def test_request_needs_positive_n():
    with pytest.raises(ValueError):
        request(n=0)
