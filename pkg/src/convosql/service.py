"""HTTP facade: session management, database upload and browsing, streamed
turn processing over server-sent events, and demonstration-pool endpoints.

Every turn's event stream follows one grammar, error turns included: at least
one stage event, any number of token events, exactly one sql event, exactly
one result or error event, and a final done event.
"""

from __future__ import annotations

import hashlib
import json
import os
import queue
import secrets
import tempfile
import threading
import time
import uuid
from pathlib import Path

from fastapi import Depends, FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.responses import StreamingResponse

from .catalog import (
    Catalog,
    CorruptDatabase,
    DuplicateId,
    EmptyDatabase,
    UnknownDatabase,
    UnknownTable,
    preview_rows,
    serialize_schema,
)
from .demopool import (
    DemoPool,
    FusedConfig,
    InsufficientPool,
    InvalidDemoFile,
    default_pool,
    fused_augment_report,
    load_pool,
)
from .llm import EndpointConfig, HttpChatClient, ScriptedMock
from .pipeline import PipelineConfig, SessionState, Turn, process_turn
from .retrieval import RetrievalConfig

PBKDF2_ITERATIONS = 120_000
TITLE_LIMIT = 60


class UserStore:
    """Username to salted password digest, persisted as one JSON file."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        if self.path.exists():
            self.users = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.users = {}

    def _save(self):
        self.path.write_text(
            json.dumps(self.users, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @staticmethod
    def _digest(password: str, salt: bytes) -> str:
        return hashlib.pbkdf2_hmac(
            "sha256", password.encode("utf-8"), salt, PBKDF2_ITERATIONS
        ).hex()

    def register(self, username: str, password: str) -> bool:
        with self._lock:
            if username in self.users:
                return False
            salt = secrets.token_bytes(16)
            self.users[username] = {
                "salt": salt.hex(),
                "digest": self._digest(password, salt),
            }
            self._save()
            return True

    def check(self, username: str, password: str) -> bool:
        record = self.users.get(username)
        if record is None:
            return False
        digest = self._digest(password, bytes.fromhex(record["salt"]))
        return secrets.compare_digest(digest, record["digest"])


class SessionStore:
    """Sessions persisted as JSON lines: typed meta and turn records, so a
    restarted process can rebuild every transcript from disk."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, SessionState] = {}
        self._turn_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        for path in sorted(self.root.glob("*.jsonl")):
            session = self._load(path)
            if session is not None:
                self._sessions[session.session_id] = session

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.jsonl"

    def _load(self, path: Path) -> SessionState | None:
        session = None
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if record["kind"] == "meta":
                if session is None:
                    session = SessionState(
                        record["session_id"],
                        db_id=record.get("db_id"),
                        created_at=record["created_at"],
                        updated_at=record["updated_at"],
                    )
                else:
                    session.db_id = record.get("db_id")
                    session.updated_at = record["updated_at"]
            elif record["kind"] == "turn" and session is not None:
                session.turns.append(Turn.from_dict(record["data"]))
        return session

    def _write(self, session: SessionState, record: dict):
        with open(self._path(session.session_id), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def _meta(self, session: SessionState) -> dict:
        return {
            "kind": "meta",
            "session_id": session.session_id,
            "db_id": session.db_id,
            "created_at": session.created_at,
            "updated_at": session.updated_at,
        }

    def create(self) -> SessionState:
        session = SessionState(uuid.uuid4().hex)
        with self._lock:
            self._sessions[session.session_id] = session
        self._write(session, self._meta(session))
        return session

    def get(self, session_id: str) -> SessionState | None:
        return self._sessions.get(session_id)

    def list(self) -> list[dict]:
        items = []
        for session in self._sessions.values():
            title = session.turns[0].question if session.turns else "(empty)"
            items.append(
                {
                    "session_id": session.session_id,
                    "title": title[:TITLE_LIMIT],
                    "db_id": session.db_id,
                    "turn_count": len(session.turns),
                    "updated_at": session.updated_at,
                }
            )
        items.sort(key=lambda it: (-it["updated_at"], it["session_id"]))
        return items

    def append_turn(self, session: SessionState, turn: Turn):
        session.updated_at = time.time()
        self._write(session, {"kind": "turn", "data": turn.as_dict()})
        self._write(session, self._meta(session))

    def turn_lock(self, session_id: str) -> threading.Lock:
        with self._lock:
            return self._turn_locks.setdefault(session_id, threading.Lock())


def _sse(event: str, payload: dict) -> str:
    body = json.dumps({"event": event, "payload": payload}, ensure_ascii=False)
    return f"data: {body}\n\n"


def _make_llm(mock_script, endpoint, model, api_key_env):
    if mock_script:
        spec = json.loads(Path(mock_script).read_text(encoding="utf-8"))
        if isinstance(spec, list):
            return ScriptedMock(sequence=spec)
        if spec.get("mode") == "keyed":
            return ScriptedMock(keyed=spec["replies"])
        return ScriptedMock(sequence=spec["replies"])
    if endpoint:
        config = EndpointConfig(
            base_url=endpoint,
            api_key=os.environ.get(api_key_env, ""),
            model_name=model,
        )
        return HttpChatClient(config)
    raise ValueError("an LLM source is required: pass llm, mock_script, or endpoint")


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    retrieval = RetrievalConfig(**data.get("retrieval", {}))
    fields = {
        k: data[k]
        for k in (
            "n_shot",
            "max_debug_iters",
            "enable_pre_sql",
            "enable_self_debug",
            "retrieval_per_turn",
        )
        if k in data
    }
    return PipelineConfig(retrieval=retrieval, **fields)


def build_app(
    data_dir,
    llm=None,
    mock_script=None,
    endpoint=None,
    model: str = "",
    api_key_env: str = "CONVOSQL_API_KEY",
    pipeline_config: PipelineConfig | None = None,
    static_dir=None,
) -> FastAPI:
    data = Path(data_dir)
    data.mkdir(parents=True, exist_ok=True)
    catalog = Catalog(root=data / "databases")
    pool_path = data / "pool.json"
    if pool_path.exists():
        pool = load_pool(pool_path, catalog=catalog)
        pool.path = pool_path
    else:
        pool = default_pool(catalog)
        pool.path = pool_path
    state = {"pool": pool}
    store = SessionStore(data / "sessions")
    users = UserStore(data / "users.json")
    tokens: dict[str, str] = {}
    cfg = pipeline_config or PipelineConfig()
    if llm is None:
        llm = _make_llm(mock_script, endpoint, model, api_key_env)

    app = FastAPI(title="conversational text-to-SQL service")

    def require_auth(request: Request) -> str:
        header = request.headers.get("authorization", "")
        token = header[7:] if header.startswith("Bearer ") else ""
        username = tokens.get(token)
        if username is None:
            raise HTTPException(status_code=401, detail="missing or invalid token")
        return username

    # -- health and auth ---------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/auth/register", status_code=201)
    def register(body: dict):
        username, password = body.get("username"), body.get("password")
        if not username or not password:
            raise HTTPException(status_code=400, detail="username and password required")
        if not users.register(username, password):
            raise HTTPException(status_code=409, detail="username taken")
        return {"username": username}

    @app.post("/auth/login")
    def login(body: dict):
        username, password = body.get("username", ""), body.get("password", "")
        if not users.check(username, password):
            raise HTTPException(status_code=401, detail="bad credentials")
        token = secrets.token_hex(16)
        tokens[token] = username
        return {"token": token}

    # -- databases ---------------------------------------------------------

    @app.post("/databases", status_code=201)
    async def upload_database(
        file: UploadFile = File(...),
        db_id: str | None = Form(None),
        replace: bool = False,
        user: str = Depends(require_auth),
    ):
        blob = await file.read()
        ident = db_id or Path(file.filename or "database").stem
        try:
            entry = catalog.ingest(blob, ident, replace=replace)
        except DuplicateId as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (CorruptDatabase, EmptyDatabase) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"db_id": entry.db_id, "tables": [t.name for t in entry.tables]}

    @app.get("/databases")
    def list_databases(user: str = Depends(require_auth)):
        out = []
        for ident in catalog.ids():
            entry = catalog.get(ident)
            out.append(
                {
                    "db_id": entry.db_id,
                    "display_name": entry.display_name,
                    "tables": [
                        {"name": t.name, "row_count": t.row_count} for t in entry.tables
                    ],
                }
            )
        return out

    @app.get("/databases/{db_id}/schema")
    def get_schema(db_id: str, user: str = Depends(require_auth)):
        try:
            entry = catalog.get(db_id)
        except UnknownDatabase as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {
            "db_id": entry.db_id,
            "schema_text": serialize_schema(entry),
            "tables": [
                {
                    "name": t.name,
                    "row_count": t.row_count,
                    "columns": [
                        {
                            "name": c.name,
                            "type": c.declared_type,
                            "is_primary_key": c.is_primary_key,
                            "foreign_ref": list(c.foreign_ref) if c.foreign_ref else None,
                        }
                        for c in t.columns
                    ],
                }
                for t in entry.tables
            ],
        }

    @app.get("/databases/{db_id}/tables/{table}/rows")
    def get_rows(
        db_id: str, table: str, limit: int = 50, user: str = Depends(require_auth)
    ):
        try:
            entry = catalog.get(db_id)
            columns, rows = preview_rows(entry, table, limit)
        except (UnknownDatabase, UnknownTable) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"columns": columns, "rows": rows}

    # -- demonstration pool --------------------------------------------------

    @app.post("/demos")
    async def upload_demos(
        request: Request, mode: str = "merge", user: str = Depends(require_auth)
    ):
        if mode not in ("merge", "replace"):
            raise HTTPException(status_code=400, detail="mode must be merge or replace")
        body = await request.body()
        with tempfile.NamedTemporaryFile("wb", suffix=".json", delete=False) as fh:
            fh.write(body)
            tmp = fh.name
        try:
            incoming = load_pool(tmp, catalog=catalog)
        except InvalidDemoFile as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        finally:
            os.unlink(tmp)
        try:
            if mode == "replace":
                merged = DemoPool(incoming.demos, catalog=catalog, path=pool_path)
            else:
                merged = DemoPool(
                    state["pool"].demos + incoming.demos, catalog=catalog, path=pool_path
                )
        except InvalidDemoFile as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        merged.save()
        state["pool"] = merged
        return {"size": len(merged)}

    @app.get("/demos")
    def list_demos(user: str = Depends(require_auth)):
        return [d.as_dict() for d in state["pool"].demos]

    @app.post("/demos/augment")
    def augment_demos(body: dict | None = None, user: str = Depends(require_auth)):
        body = body or {}
        rounds = int(body.get("rounds", 1))
        seed = int(body.get("seed", 0))
        if rounds <= 0:
            return {"candidates": 0, "accepted": 0, "rejected": {}}
        fcfg = FusedConfig(rounds=rounds, random_seed=seed)
        try:
            grown, summary = fused_augment_report(state["pool"], catalog, llm, fcfg)
        except InsufficientPool as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        state["pool"] = grown
        return summary

    # -- sessions ------------------------------------------------------------

    @app.post("/sessions", status_code=201)
    def create_session(user: str = Depends(require_auth)):
        session = store.create()
        return {"session_id": session.session_id}

    @app.get("/sessions")
    def list_sessions(user: str = Depends(require_auth)):
        return store.list()

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str, user: str = Depends(require_auth)):
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return {
            "session_id": session.session_id,
            "db_id": session.db_id,
            "created_at": session.created_at,
            "updated_at": session.updated_at,
            "turns": [t.as_dict() for t in session.turns],
        }

    @app.post("/sessions/{session_id}/message")
    def post_message(session_id: str, body: dict, user: str = Depends(require_auth)):
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        question = (body or {}).get("question", "").strip()
        if not question:
            raise HTTPException(status_code=400, detail="question required")
        lock = store.turn_lock(session_id)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="turn in flight")

        events: queue.Queue = queue.Queue()

        def on_stage(name, payload):
            events.put(("stage", {"name": name, **payload}))

        def on_token(text):
            events.put(("token", {"text": text}))

        def work():
            try:
                turn = process_turn(
                    session,
                    question,
                    catalog,
                    state["pool"],
                    llm,
                    cfg,
                    on_stage=on_stage,
                    on_token=on_token,
                )
                store.append_turn(session, turn)
                events.put(("sql", {"sql": turn.final_sql}))
                if turn.result.error is None:
                    events.put(("result", turn.result.as_dict()))
                else:
                    events.put(
                        (
                            "error",
                            {
                                "message": turn.result.error.message,
                                "kind": turn.result.error.kind,
                            },
                        )
                    )
                events.put(("done", {}))
            except Exception as exc:
                events.put(("_fail", f"{type(exc).__name__}: {exc}"))
            events.put(None)

        worker = threading.Thread(target=work, daemon=True)

        def generate():
            worker.start()
            stages = 0
            try:
                while True:
                    item = events.get()
                    if item is None:
                        break
                    kind, payload = item
                    if kind == "_fail":
                        if stages == 0:
                            yield _sse("stage", {"name": "failed"})
                        yield _sse("sql", {"sql": ""})
                        yield _sse("error", {"message": payload, "kind": "pipeline"})
                        yield _sse("done", {})
                        continue
                    if kind == "stage":
                        stages += 1
                    yield _sse(kind, payload)
            finally:
                lock.release()

        return StreamingResponse(generate(), media_type="text/event-stream")

    if static_dir is not None:
        # hosts the built web client on the same origin; mounted last so the
        # API routes above keep precedence
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="static")

    return app


def load_service_config(path) -> dict:
    """Read the serve-time config file: data_dir plus optional endpoint and
    pipeline sections."""
    return json.loads(Path(path).read_text(encoding="utf-8"))
