/** View model for the chat area.
 *
 * A turn's view state is a pure fold over its event stream: foldEvent never
 * mutates its input and depends on nothing but (state, event), so replaying
 * the same events always rebuilds the same view. The client renders server
 * payloads as they are; it never parses SQL or computes its own metrics.
 */

import type { ApiEvent } from "./events.js";

export interface StageEntry {
  name: string;
  detail: Record<string, unknown>;
}

export interface ResultTable {
  columns: string[];
  rows: unknown[][];
  truncated: boolean;
}

export interface ErrorBanner {
  message: string;
  kind: string;
}

/** streaming: events still arriving; done: closing event seen;
 * dropped: the connection ended before the closing event. */
export type TurnStatus = "streaming" | "done" | "dropped";

export interface ChatViewTurn {
  question: string;
  stages: StageEntry[];
  streamedSql: string;
  finalSql: string | null;
  result: ResultTable | null;
  error: ErrorBanner | null;
  status: TurnStatus;
}

export function newTurn(question: string): ChatViewTurn {
  return {
    question,
    stages: [],
    streamedSql: "",
    finalSql: null,
    result: null,
    error: null,
    status: "streaming",
  };
}

export function foldEvent(turn: ChatViewTurn, ev: ApiEvent): ChatViewTurn {
  switch (ev.event) {
    case "stage": {
      const { name, ...detail } = ev.payload;
      const entry: StageEntry = { name: String(name ?? "?"), detail };
      return { ...turn, stages: [...turn.stages, entry] };
    }
    case "token":
      return { ...turn, streamedSql: turn.streamedSql + String(ev.payload.text ?? "") };
    case "sql":
      return { ...turn, finalSql: String(ev.payload.sql ?? "") };
    case "result":
      return {
        ...turn,
        result: {
          columns: (ev.payload.columns as string[] | undefined) ?? [],
          rows: (ev.payload.rows as unknown[][] | undefined) ?? [],
          truncated: Boolean(ev.payload.truncated),
        },
      };
    case "error":
      return {
        ...turn,
        error: {
          message: String(ev.payload.message ?? ""),
          kind: String(ev.payload.kind ?? ""),
        },
      };
    case "done":
      return { ...turn, status: "done" };
    default:
      // unknown event names are forward-compatible noise
      return turn;
  }
}

export function foldStream(question: string, events: ApiEvent[]): ChatViewTurn {
  return events.reduce(foldEvent, newTurn(question));
}

/** Flag a turn whose stream ended early; a finished turn stays finished. */
export function markDropped(turn: ChatViewTurn): ChatViewTurn {
  if (turn.status === "done") {
    return turn;
  }
  return { ...turn, status: "dropped" };
}

// -- persisted transcripts ---------------------------------------------------

interface TurnRecord {
  question?: unknown;
  final_sql?: unknown;
  result?: {
    columns?: unknown;
    rows?: unknown;
    truncated?: unknown;
    error?: { message?: unknown; kind?: unknown } | null;
  } | null;
}

/** Rebuild the view of a finished turn from its stored transcript record. */
export function turnFromRecord(record: TurnRecord): ChatViewTurn {
  const result = record.result ?? {};
  const error = result.error ?? null;
  return {
    question: String(record.question ?? ""),
    stages: [],
    streamedSql: "",
    finalSql: record.final_sql === undefined ? null : String(record.final_sql),
    result: error
      ? null
      : {
          columns: (result.columns as string[] | undefined) ?? [],
          rows: (result.rows as unknown[][] | undefined) ?? [],
          truncated: Boolean(result.truncated),
        },
    error: error
      ? { message: String(error.message ?? ""), kind: String(error.kind ?? "") }
      : null,
    status: "done",
  };
}

// -- session list -------------------------------------------------------------

export interface SessionListItem {
  session_id: string;
  title: string;
  db_id: string | null;
  turn_count: number;
  updated_at: number;
}

/** Most recently touched first; ties settle on the id so polling is stable. */
export function sortSessions(items: SessionListItem[]): SessionListItem[] {
  return [...items].sort(
    (a, b) => b.updated_at - a.updated_at || a.session_id.localeCompare(b.session_id),
  );
}
