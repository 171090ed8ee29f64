import socket
import threading

import numpy as np
import pytest
import requests

from leakbench.apiserve import BudgetLedger, DirectTransport, HttpTransport, client_query, serve
from leakbench.defense import GaussianNoise, MostLeast, ReverseSigmoid
from leakbench.errors import ApiError, BudgetExhausted, ConfigError, StartupError
from leakbench.victim import predict_batch


@pytest.fixture(scope="module")
def service(small_victim):
    with serve(small_victim, max_batch=64) as handle:
        yield handle


class TestServer:
    def test_predict(self, service):
        r = requests.post(f"{service.url}/v1/predict", json={"texts": ["good phone"]})
        assert r.status_code == 200
        body = r.json()
        post = np.asarray(body["posteriors"])
        assert post.shape == (1, 4)
        assert abs(post.sum() - 1.0) < 1e-9 and np.all(post >= 0)
        assert body["model_info"]["num_classes"] == 4

    def test_invalid_json(self, service):
        r = requests.post(f"{service.url}/v1/predict", data=b"{nope", headers={"Content-Type": "application/json"})
        assert r.status_code == 400

    @pytest.mark.parametrize(
        "payload", [{"texts": "one"}, {"texts": [1, 2]}, {"texts": ["!!!"]}, {"texts": ["a"], "ids": ["1", "2"]}, []]
    )
    def test_bad_payloads(self, service, payload):
        assert requests.post(f"{service.url}/v1/predict", json=payload).status_code == 400

    def test_oversized_batch(self, service):
        r = requests.post(f"{service.url}/v1/predict", json={"texts": ["x"] * 65})
        assert r.status_code == 413

    def test_health_and_info(self, service):
        r = requests.get(f"{service.url}/v1/health")
        assert r.status_code == 200 and r.text == "ok"
        info = requests.get(f"{service.url}/v1/info").json()
        assert info == {"num_classes": 4, "defense": "none"}

    def test_unknown_route(self, service):
        assert requests.get(f"{service.url}/v2/whatever").status_code == 404
        assert requests.post(f"{service.url}/v1/info", json={}).status_code == 404

    def test_bind_failure(self, small_victim):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            s.listen(1)
            port = s.getsockname()[1]
            with pytest.raises(StartupError):
                serve(small_victim, port=port)


class TestLedger:
    def test_reserve_and_refund(self):
        ledger = BudgetLedger(10)
        ledger.reserve(4)
        assert ledger.used == 4 and ledger.remaining == 6
        with pytest.raises(BudgetExhausted):
            ledger.reserve(7)
        assert ledger.used == 4
        ledger.refund(4)
        assert ledger.used == 0

    def test_negative_budget(self):
        with pytest.raises(ConfigError):
            BudgetLedger(-1)

    def test_concurrent_accounting(self):
        ledger = BudgetLedger(1000)
        accepted = []
        lock = threading.Lock()

        def worker(n):
            for _ in range(50):
                try:
                    ledger.reserve(n)
                except BudgetExhausted:
                    continue
                with lock:
                    accepted.append(n)

        threads = [threading.Thread(target=worker, args=(n,)) for n in (1, 3, 7, 11)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert ledger.used == sum(accepted) <= 1000


class TestClient:
    def test_budget_charged(self, small_victim, small_split):
        ledger = BudgetLedger(100)
        out = client_query(small_victim, small_split.test[:10], ledger)
        assert len(out) == 10 and ledger.used == 10

    def test_budget_exhausted_spends_nothing(self, small_victim, small_split):
        ledger = BudgetLedger(5)
        with pytest.raises(BudgetExhausted):
            client_query(small_victim, small_split.test[:10], ledger)
        assert ledger.used == 0

    def test_failed_transport_refunds(self, small_split):
        class Broken:
            def predict(self, docs):
                raise ApiError("boom", 500)

        ledger = BudgetLedger(100)
        with pytest.raises(ApiError):
            client_query(Broken(), small_split.test[:10], ledger)
        assert ledger.used == 0

    @pytest.mark.parametrize("defense", [None, GaussianNoise(0.05, seed=2), ReverseSigmoid(noise=0.05), MostLeast()])
    def test_loopback_equals_in_process(self, small_victim, small_split, defense):
        v = small_victim if defense is None else small_victim.with_defense(defense)
        docs = small_split.test
        with serve(v) as handle:
            remote = np.vstack(client_query(handle.url, docs, BudgetLedger(len(docs)), batch_size=32))
        local = predict_batch(v, docs)
        np.testing.assert_allclose(remote, local, rtol=0, atol=1e-9)
        # shortest round-trip JSON floats make the match exact
        np.testing.assert_array_equal(remote, local)

    def test_direct_transport_matches(self, small_victim, small_split):
        docs = small_split.test[:7]
        np.testing.assert_array_equal(DirectTransport(small_victim).predict(docs), predict_batch(small_victim, docs))

    def test_server_error_becomes_api_error(self, service, small_split):
        ledger = BudgetLedger(1000)
        with pytest.raises(ApiError) as err:
            client_query(service.url, small_split.test[:80], ledger, batch_size=80)
        assert err.value.status == 413
        assert ledger.used == 0

    def test_unreachable_service(self, small_split):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        t = HttpTransport(f"http://127.0.0.1:{port}", timeout=1.0, retries=1, backoff=0.0)
        with pytest.raises(ApiError):
            t.predict(small_split.test[:1])

    def test_info(self, service):
        assert HttpTransport(service.url).info()["num_classes"] == 4
