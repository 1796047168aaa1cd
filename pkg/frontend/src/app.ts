/** Single-page client: login, sidebar (sessions, databases, demo pool), and
 * the chat area with streamed turns. All data comes from the service API;
 * this file only wires DOM to the typed client and the view-state fold. */

import { ApiClient, ApiError, type SchemaView } from "./api.js";
import { bodyChunks } from "./events.js";
import { consumeStream } from "./stream.js";
import {
  type ChatViewTurn,
  type SessionListItem,
  sortSessions,
  turnFromRecord,
} from "./viewstate.js";

const POLL_MS = 5000;

const api = new ApiClient("");

let currentSession: string | null = null;
let turns: ChatViewTurn[] = [];
let streaming = false;
let pollTimer: number | undefined;

// -- tiny DOM helpers ---------------------------------------------------------

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function clear(node: HTMLElement): HTMLElement {
  node.replaceChildren();
  return node;
}

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node;
}

function toast(message: string): void {
  const box = byId("toasts");
  const item = el("div", { class: "toast" }, message);
  box.append(item);
  window.setTimeout(() => item.remove(), 6000);
}

function reportError(err: unknown): void {
  if (err instanceof ApiError) {
    toast(`${err.status}: ${err.detail}`);
  } else {
    toast(String(err));
  }
}

// -- turn rendering -----------------------------------------------------------

function renderTable(result: { columns: string[]; rows: unknown[][]; truncated: boolean }) {
  const head = el("tr", {}, ...result.columns.map((c) => el("th", {}, c)));
  const body = result.rows.map((row) =>
    el("tr", {}, ...row.map((v) => el("td", {}, v === null ? "NULL" : String(v)))),
  );
  const table = el("table", { class: "result" }, head, ...body);
  const wrap = el("div", { class: "result-wrap" }, table);
  if (result.truncated) {
    wrap.append(el("div", { class: "muted" }, "(truncated)"));
  }
  return wrap;
}

function renderTurn(turn: ChatViewTurn, index: number): HTMLElement {
  const box = el("div", { class: "turn" });
  box.append(el("div", { class: "question" }, turn.question));

  if (turn.stages.length > 0) {
    const chips = turn.stages.map((s) =>
      el("span", { class: "chip", title: JSON.stringify(s.detail) }, s.name),
    );
    box.append(el("div", { class: "stages" }, ...chips));
  }

  const sql = turn.finalSql ?? (turn.streamedSql || null);
  if (sql !== null && sql !== "") {
    box.append(el("pre", { class: "sql" }, el("code", {}, sql)));
  }

  if (turn.error) {
    box.append(
      el("div", { class: "banner error" }, `${turn.error.kind}: ${turn.error.message}`),
    );
  } else if (turn.result) {
    box.append(renderTable(turn.result));
  }

  if (turn.status === "dropped") {
    const retry = el("button", { type: "button" }, "Reload transcript");
    retry.addEventListener("click", () => {
      if (currentSession) {
        void loadSession(currentSession);
      }
    });
    box.append(
      el("div", { class: "banner retry" }, "Connection lost mid-turn. ", retry),
    );
  }

  box.dataset.index = String(index);
  return box;
}

function renderTurns(): void {
  const list = clear(byId("turns"));
  turns.forEach((turn, i) => list.append(renderTurn(turn, i)));
  list.scrollTop = list.scrollHeight;
}

// -- sessions -----------------------------------------------------------------

async function refreshSessions(): Promise<void> {
  try {
    const items = sortSessions(await api.listSessions());
    const list = clear(byId("session-list"));
    for (const item of items) {
      list.append(renderSessionItem(item));
    }
  } catch (err) {
    reportError(err);
  }
}

function renderSessionItem(item: SessionListItem): HTMLElement {
  const row = el(
    "div",
    { class: "session-item" + (item.session_id === currentSession ? " active" : "") },
    el("div", { class: "title" }, item.title),
    el("div", { class: "muted" }, `${item.turn_count} turns`),
  );
  row.addEventListener("click", () => void loadSession(item.session_id));
  return row;
}

async function loadSession(sessionId: string): Promise<void> {
  try {
    const transcript = await api.getSession(sessionId);
    currentSession = sessionId;
    turns = transcript.turns.map(turnFromRecord);
    byId("session-label").textContent = transcript.db_id
      ? `${sessionId.slice(0, 8)} · ${transcript.db_id}`
      : sessionId.slice(0, 8);
    renderTurns();
    void refreshSessions();
  } catch (err) {
    reportError(err);
  }
}

async function newSession(): Promise<void> {
  try {
    const sessionId = await api.createSession();
    await loadSession(sessionId);
  } catch (err) {
    reportError(err);
  }
}

// -- databases ----------------------------------------------------------------

async function refreshDatabases(): Promise<void> {
  try {
    const ids = await api.listDatabases();
    const list = clear(byId("db-list"));
    for (const dbId of ids) {
      list.append(renderDatabaseEntry(dbId));
    }
  } catch (err) {
    reportError(err);
  }
}

function renderDatabaseEntry(dbId: string): HTMLElement {
  const details = el("details", {}, el("summary", {}, dbId));
  let loaded = false;
  details.addEventListener("toggle", () => {
    if (details.open && !loaded) {
      loaded = true;
      void api
        .getSchema(dbId)
        .then((schema) => details.append(renderSchemaTree(schema)))
        .catch(reportError);
    }
  });
  return details;
}

function renderSchemaTree(schema: SchemaView): HTMLElement {
  const tree = el("div", { class: "schema" });
  for (const table of schema.tables) {
    const cols = table.columns
      .map((c) => c.name + (c.primary_key ? "*" : ""))
      .join(", ");
    const row = el(
      "div",
      { class: "table-row" },
      el("span", { class: "table-name" }, table.name),
      el("span", { class: "muted" }, ` ${cols}`),
    );
    row.addEventListener("click", () => void previewRows(schema.db_id, table.name));
    tree.append(row);
  }
  return tree;
}

async function previewRows(dbId: string, table: string): Promise<void> {
  try {
    const page = await api.getTableRows(dbId, table, 50);
    const target = clear(byId("preview"));
    target.append(
      el("div", { class: "muted" }, `${dbId}.${table}`),
      renderTable({ columns: page.columns, rows: page.rows, truncated: false }),
    );
  } catch (err) {
    reportError(err);
  }
}

async function uploadDatabase(input: HTMLInputElement): Promise<void> {
  const file = input.files?.[0];
  if (!file) {
    return;
  }
  const fallback = file.name.replace(/\.(sqlite3?|db)$/i, "");
  const dbId = window.prompt("database id", fallback);
  if (!dbId) {
    return;
  }
  try {
    await api.uploadDatabase(file, dbId);
    toast(`uploaded ${dbId}`);
    await refreshDatabases();
  } catch (err) {
    reportError(err);
  } finally {
    input.value = "";
  }
}

// -- demo pool ------------------------------------------------------------------

async function refreshDemos(): Promise<void> {
  try {
    const demos = await api.listDemos();
    byId("demo-count").textContent = `${demos.length} demonstrations`;
  } catch (err) {
    reportError(err);
  }
}

async function uploadDemos(input: HTMLInputElement): Promise<void> {
  const file = input.files?.[0];
  if (!file) {
    return;
  }
  try {
    const text = await file.text();
    const size = await api.uploadDemos(JSON.parse(text), "merge");
    toast(`pool now holds ${size} demos`);
    await refreshDemos();
  } catch (err) {
    reportError(err);
  } finally {
    input.value = "";
  }
}

async function augmentDemos(): Promise<void> {
  try {
    const summary = await api.augmentDemos(1);
    toast(`augment: ${summary.accepted} of ${summary.candidates} candidates accepted`);
    await refreshDemos();
  } catch (err) {
    reportError(err);
  }
}

// -- chat -----------------------------------------------------------------------

async function sendQuestion(): Promise<void> {
  const input = byId("question") as HTMLTextAreaElement;
  const question = input.value.trim();
  if (!question || streaming) {
    return;
  }
  if (!currentSession) {
    await newSession();
    if (!currentSession) {
      return;
    }
  }
  streaming = true;
  input.value = "";
  const slot = turns.length;
  try {
    const res = await api.streamMessage(currentSession, question);
    const outcome = await consumeStream(bodyChunks(res), question, (turn) => {
      turns[slot] = turn;
      renderTurns();
    });
    turns[slot] = outcome.turn;
    renderTurns();
    void refreshSessions();
  } catch (err) {
    reportError(err);
  } finally {
    streaming = false;
  }
}

// -- auth and boot ---------------------------------------------------------------

async function handleLogin(register: boolean): Promise<void> {
  const username = (byId("username") as HTMLInputElement).value.trim();
  const password = (byId("password") as HTMLInputElement).value;
  if (!username || !password) {
    toast("username and password required");
    return;
  }
  try {
    if (register) {
      await api.register(username, password);
    }
    await api.login(username, password);
    byId("login").hidden = true;
    byId("workspace").hidden = false;
    await Promise.all([refreshSessions(), refreshDatabases(), refreshDemos()]);
    pollTimer = window.setInterval(() => void refreshSessions(), POLL_MS);
  } catch (err) {
    reportError(err);
  }
}

export function boot(): void {
  byId("login-btn").addEventListener("click", () => void handleLogin(false));
  byId("register-btn").addEventListener("click", () => void handleLogin(true));
  byId("new-session").addEventListener("click", () => void newSession());
  byId("send").addEventListener("click", () => void sendQuestion());
  (byId("question") as HTMLTextAreaElement).addEventListener("keydown", (ev) => {
    if (ev.key === "Enter" && !ev.shiftKey) {
      ev.preventDefault();
      void sendQuestion();
    }
  });
  byId("db-upload").addEventListener("change", (ev) =>
    void uploadDatabase(ev.target as HTMLInputElement),
  );
  byId("demo-upload").addEventListener("change", (ev) =>
    void uploadDemos(ev.target as HTMLInputElement),
  );
  byId("augment").addEventListener("click", () => void augmentDemos());
  window.addEventListener("beforeunload", () => {
    if (pollTimer !== undefined) {
      window.clearInterval(pollTimer);
    }
  });
}

boot();
