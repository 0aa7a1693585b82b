import hashlib
import threading

import pytest
import requests
from lxml import etree

from config.settings import DAV_PROPS_NAMESPACE
from sheetguard.davserver import DavHandler, basic_auth_user, check_password, status_for
from sheetguard.errors import GoneVersion, Locked, NotFound, StorageFailure
from sheetguard.repository import RetentionPolicy

D = "{DAV:}"
SG = f"{{{DAV_PROPS_NAMESPACE}}}"
USERS = {"alice": "secret", "bob": "hunter2"}


@pytest.fixture
def dav(store):
    return DavHandler(store, USERS)


def call(dav, method, path, user="alice", headers=None, body=b""):
    return dav.handle_request(method, path, headers or {}, body, authenticated_user=user)


def lock_token(response):
    return response.header("Lock-Token").strip("<>").removeprefix("opaquelocktoken:")


def propfind_body(*tags):
    props = "".join(f"<{t}/>" for t in tags)
    return (
        f'<?xml version="1.0"?><D:propfind xmlns:D="DAV:" xmlns:sg="{DAV_PROPS_NAMESPACE}">'
        f"<D:prop>{props}</D:prop></D:propfind>"
    ).encode()


class TestAuth:
    def test_unauthenticated_gets_challenge(self, dav):
        resp = dav.handle_request("GET", "/a.xlsx")
        assert resp.status == 401
        assert resp.header("WWW-Authenticate").startswith("Basic realm=")

    def test_no_users_means_open(self, store):
        resp = DavHandler(store).handle_request("PUT", "/a.xlsx", {}, b"x")
        assert resp.status == 201
        assert store.latest("a.xlsx").author == "anonymous"

    def test_passwords(self):
        digest = "sha256:" + hashlib.sha256(b"pw").hexdigest()
        users = {"alice": "secret", "carol": digest}
        assert check_password(users, "alice", "secret")
        assert check_password(users, "carol", "pw")
        assert not check_password(users, "carol", "sha256:" + digest)
        assert not check_password(users, "mallory", "secret")

    def test_basic_header(self):
        assert basic_auth_user(USERS, "Basic YWxpY2U6c2VjcmV0") == "alice"
        assert basic_auth_user(USERS, "Basic YWxpY2U6d3Jvbmc=") is None
        assert basic_auth_user(USERS, "Basic !!!") is None
        assert basic_auth_user(USERS, "Bearer abc") is None
        assert basic_auth_user(USERS, None) is None


class TestMethods:
    def test_options(self, dav):
        resp = call(dav, "OPTIONS", "/")
        assert resp.status == 200
        assert resp.header("DAV") == "1, 2"
        assert "PROPFIND" in resp.header("Allow")

    @pytest.mark.parametrize("method", ["DELETE", "PROPPATCH", "COPY", "MOVE"])
    def test_refused(self, dav, method):
        assert call(dav, method, "/a.xlsx").status == 405

    def test_unknown_method(self, dav):
        assert call(dav, "PATCH", "/a.xlsx").status == 501

    def test_bad_path(self, dav):
        assert call(dav, "GET", "/a/../b.xlsx").status == 400

    def test_status_mapping(self):
        assert status_for(Locked("a", "bob")) == 423
        assert status_for(GoneVersion("gone")) == 410
        assert status_for(NotFound("x")) == 404
        assert status_for(StorageFailure("disk")) == 500


class TestPutGet:
    def test_versions(self, dav):
        first = call(dav, "PUT", "/book.xlsx", body=b"one")
        assert (first.status, first.header("X-SheetGuard-Version")) == (201, "1")
        second = call(dav, "PUT", "/book.xlsx", body=b"two")
        assert (second.status, second.header("X-SheetGuard-Version")) == (204, "2")

        latest = call(dav, "GET", "/book.xlsx")
        assert latest.body == b"two"
        assert latest.header("ETag") == f'"{hashlib.sha256(b"two").hexdigest()}"'
        assert call(dav, "GET", "/book.xlsx?version=1").body == b"one"
        assert call(dav, "GET", "/book.xlsx?version=x").status == 400
        assert call(dav, "GET", "/book.xlsx?version=3").status == 404

    def test_headers_match_body_under_concurrent_puts(self, dav):
        call(dav, "PUT", "/book.xlsx", body=b"v1")
        stop = threading.Event()

        def writer():
            n = 2
            while not stop.is_set() and n < 200:
                call(dav, "PUT", "/book.xlsx", "bob", body=f"v{n}".encode())
                n += 1

        t = threading.Thread(target=writer)
        t.start()
        try:
            for _ in range(200):
                resp = call(dav, "GET", "/book.xlsx")
                assert resp.header("ETag") == f'"{hashlib.sha256(resp.body).hexdigest()}"'
                assert resp.body == f"v{resp.header('X-SheetGuard-Version')}".encode()
        finally:
            stop.set()
            t.join()

    def test_head(self, dav):
        call(dav, "PUT", "/book.xlsx", body=b"12345")
        resp = call(dav, "HEAD", "/book.xlsx")
        assert resp.status == 200 and resp.body == b""
        assert resp.header("Content-Length") == "5"

    def test_missing(self, dav):
        assert call(dav, "GET", "/nope.xlsx").status == 404

    def test_purged_version_is_gone(self, dav, store):
        call(dav, "PUT", "/book.xlsx", body=b"one")
        call(dav, "PUT", "/book.xlsx", body=b"two")
        store.apply_retention(RetentionPolicy(keep_last=1))
        assert call(dav, "GET", "/book.xlsx?version=1").status == 410

    def test_parent_must_exist(self, dav):
        assert call(dav, "PUT", "/finance/book.xlsx", body=b"x").status == 409
        assert call(dav, "MKCOL", "/finance/").status == 201
        assert call(dav, "PUT", "/finance/book.xlsx", body=b"x").status == 201

    def test_put_onto_collection(self, dav):
        call(dav, "MKCOL", "/finance")
        assert call(dav, "PUT", "/finance", body=b"x").status == 405
        assert call(dav, "PUT", "/", body=b"x").status == 405

    def test_collection_listing(self, dav):
        call(dav, "MKCOL", "/finance")
        call(dav, "PUT", "/finance/a.xlsx", body=b"x")
        call(dav, "PUT", "/top.xlsx", body=b"y")
        assert call(dav, "GET", "/").body == b"finance/\ntop.xlsx\n"
        assert call(dav, "GET", "/finance/").body == b"a.xlsx\n"


class TestMkcol:
    def test_conflicts(self, dav):
        assert call(dav, "MKCOL", "/a/b").status == 409
        assert call(dav, "MKCOL", "/a").status == 201
        assert call(dav, "MKCOL", "/a").status == 405
        assert call(dav, "MKCOL", "/").status == 405
        assert call(dav, "MKCOL", "/c", body=b"<x/>").status == 415


class TestLocking:
    def test_lock_blocks_other_writers(self, dav, store):
        call(dav, "PUT", "/book.xlsx", body=b"one")
        locked = call(dav, "LOCK", "/book.xlsx", headers={"Timeout": "Second-600"})
        assert locked.status == 200
        token = lock_token(locked)
        assert store.active_lock("book.xlsx").ttl_seconds == 600

        assert call(dav, "PUT", "/book.xlsx", "bob", body=b"two").status == 423
        assert call(dav, "LOCK", "/book.xlsx", "bob").status == 423
        # holder without the token is refused too
        assert call(dav, "PUT", "/book.xlsx", body=b"two").status == 423

        saved = call(dav, "PUT", "/book.xlsx", headers={"If": f"(<opaquelocktoken:{token}>)"}, body=b"two")
        assert saved.status == 204
        assert store.active_lock("book.xlsx") is None

    def test_tagged_if_header(self, dav, store):
        call(dav, "PUT", "/book.xlsx", body=b"one")
        token = lock_token(call(dav, "LOCK", "/book.xlsx"))
        tagged = f"<http://dav.example/book.xlsx> (<opaquelocktoken:{token}>)"
        saved = call(dav, "PUT", "/book.xlsx", headers={"If": tagged}, body=b"two")
        assert saved.status == 204
        assert store.get("book.xlsx") == b"two"

    def test_lock_response_body(self, dav):
        resp = call(dav, "LOCK", "/book.xlsx", headers={"Timeout": "Second-99999"})
        root = etree.fromstring(resp.body)
        active = root.find(f"{D}lockdiscovery/{D}activelock")
        assert active.findtext(f"{D}owner") == "alice"
        assert active.findtext(f"{D}timeout") == "Second-3600"
        assert active.findtext(f"{D}locktoken/{D}href") == "opaquelocktoken:" + lock_token(resp)

    def test_refresh(self, dav, clock):
        token = lock_token(call(dav, "LOCK", "/book.xlsx", headers={"Timeout": "Second-60"}))
        clock.advance(50)
        refreshed = call(dav, "LOCK", "/book.xlsx",
                         headers={"If": f"(<opaquelocktoken:{token}>)", "Timeout": "Second-60"})
        assert lock_token(refreshed) == token
        clock.advance(50)
        assert call(dav, "LOCK", "/book.xlsx", "bob").status == 423

    def test_unlock(self, dav, store):
        token = lock_token(call(dav, "LOCK", "/book.xlsx"))
        assert call(dav, "UNLOCK", "/book.xlsx").status == 403
        assert call(dav, "UNLOCK", "/book.xlsx", headers={"Lock-Token": "not a token"}).status == 403
        assert call(dav, "UNLOCK", "/book.xlsx", headers={"Lock-Token": f"<{token}>"}).status == 403
        assert store.active_lock("book.xlsx") is not None
        assert call(dav, "UNLOCK", "/book.xlsx", headers={"Lock-Token": "<opaquelocktoken:00>"}).status == 403
        assert call(dav, "UNLOCK", "/book.xlsx", headers={"Lock-Token": f"<opaquelocktoken:{token}>"}).status == 204
        assert call(dav, "LOCK", "/book.xlsx", "bob").status == 200

    def test_malformed_lock_body(self, dav):
        assert call(dav, "LOCK", "/book.xlsx", body=b"<lockinfo").status == 400


class TestPropfind:
    @pytest.fixture
    def tree(self, dav):
        call(dav, "MKCOL", "/finance")
        call(dav, "PUT", "/finance/revenue.xlsx", body=b"v1")
        call(dav, "PUT", "/finance/revenue.xlsx", body=b"v2!")
        return dav

    def _responses(self, resp):
        root = etree.fromstring(resp.body)
        return {r.findtext(f"{D}href"): r for r in root.findall(f"{D}response")}

    def test_depth_one(self, tree):
        resp = call(tree, "PROPFIND", "/finance", headers={"Depth": "1"})
        assert resp.status == 207
        responses = self._responses(resp)
        assert set(responses) == {"/finance/", "/finance/revenue.xlsx"}
        assert responses["/finance/"].find(f".//{D}resourcetype/{D}collection") is not None
        file_props = responses["/finance/revenue.xlsx"]
        assert file_props.findtext(f".//{D}getcontentlength") == "3"
        assert file_props.findtext(f".//{SG}version-count") == "2"

    def test_depth_zero(self, tree):
        responses = self._responses(call(tree, "PROPFIND", "/finance", headers={"Depth": "0"}))
        assert list(responses) == ["/finance/"]

    def test_named_props(self, tree):
        body = propfind_body("D:getetag", "sg:sha256", "D:quota-used-bytes")
        resp = call(tree, "PROPFIND", "/finance/revenue.xlsx", headers={"Depth": "0"}, body=body)
        (response,) = self._responses(resp).values()
        propstats = {ps.findtext(f"{D}status"): ps for ps in response.findall(f"{D}propstat")}
        assert set(propstats) == {"HTTP/1.1 200 OK", "HTTP/1.1 404 Not Found"}
        assert propstats["HTTP/1.1 200 OK"].findtext(f".//{SG}sha256") == hashlib.sha256(b"v2!").hexdigest()
        assert propstats["HTTP/1.1 404 Not Found"].find(f".//{D}quota-used-bytes") is not None

    def test_lockdiscovery(self, tree):
        call(tree, "LOCK", "/finance/revenue.xlsx")
        resp = call(tree, "PROPFIND", "/finance/revenue.xlsx", headers={"Depth": "0"})
        assert b"activelock" in resp.body

    @pytest.mark.parametrize("depth, status", [("infinity", 403), ("2", 400)])
    def test_bad_depth(self, tree, depth, status):
        assert call(tree, "PROPFIND", "/finance", headers={"Depth": depth}).status == status

    def test_missing_and_malformed(self, tree):
        assert call(tree, "PROPFIND", "/nope", headers={"Depth": "0"}).status == 404
        assert call(tree, "PROPFIND", "/finance", headers={"Depth": "0"}, body=b"<propfind").status == 400


class TestOverHttp:
    def test_auth_required(self, dav_server):
        base, _, _ = dav_server
        assert requests.get(f"{base}/", timeout=10).status_code == 401
        assert requests.get(f"{base}/", auth=("alice", "wrong"), timeout=10).status_code == 401
        assert requests.options(f"{base}/", auth=("alice", "secret"), timeout=10).status_code == 200

    def test_put_get_quoted_names(self, dav_server):
        base, store, _ = dav_server
        auth = ("alice", "secret")
        assert requests.request("MKCOL", f"{base}/Finance%20Team/", auth=auth, timeout=10).status_code == 201
        put = requests.put(f"{base}/Finance%20Team/Q1%20plan.xlsx", data=b"bytes", auth=auth, timeout=10)
        assert put.status_code == 201
        assert store.get("Finance Team/Q1 plan.xlsx") == b"bytes"
        got = requests.get(f"{base}/Finance%20Team/Q1%20plan.xlsx", auth=("bob", "hunter2"), timeout=10)
        assert got.content == b"bytes"
        assert store.audit_log()[-1].actor == "bob"

    def test_lock_over_http(self, dav_server):
        base, _, _ = dav_server
        lock = requests.request("LOCK", f"{base}/a.xlsx", auth=("alice", "secret"), timeout=10)
        token = lock.headers["Lock-Token"]
        assert requests.put(f"{base}/a.xlsx", data=b"x", auth=("bob", "hunter2"), timeout=10).status_code == 423
        ok = requests.put(f"{base}/a.xlsx", data=b"x", auth=("alice", "secret"),
                          headers={"If": f"({token})"}, timeout=10)
        assert ok.status_code == 201

    def test_concurrent_puts(self, dav_server):
        base, store, _ = dav_server
        errors = []

        def writer(n):
            with requests.Session() as s:
                s.auth = ("alice", "secret")
                for i in range(10):
                    r = s.put(f"{base}/shared.xlsx", data=f"{n}-{i}".encode(), timeout=30)
                    if r.status_code not in (201, 204):
                        errors.append(r.status_code)

        threads = [threading.Thread(target=writer, args=(n,)) for n in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        assert [r.version for r in store.history("shared.xlsx")] == list(range(1, 81))
