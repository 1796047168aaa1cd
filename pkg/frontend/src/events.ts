/** Wire format of the turn stream: server-sent events, one JSON object per
 * "data:" block, shaped {"event": name, "payload": object}. */

export interface ApiEvent {
  event: string;
  payload: Record<string, unknown>;
}

/**
 * Incremental SSE parser. Network chunks arrive cut at arbitrary points, so
 * the parser buffers until a blank-line delimiter completes a block. A block
 * that is not valid JSON, or whose JSON lacks the event/payload shape, is
 * reported through the warn callback and skipped; the stream keeps going.
 */
export class SseParser {
  private buffer = "";

  constructor(
    private readonly warn: (message: string) => void = (m) => console.warn(m),
  ) {}

  push(chunk: string): ApiEvent[] {
    this.buffer += chunk;
    const out: ApiEvent[] = [];
    let cut: number;
    while ((cut = this.buffer.indexOf("\n\n")) !== -1) {
      const block = this.buffer.slice(0, cut);
      this.buffer = this.buffer.slice(cut + 2);
      const data = block
        .split("\n")
        .filter((line) => line.startsWith("data:"))
        .map((line) => line.slice("data:".length).trimStart())
        .join("\n");
      if (!data) {
        continue;
      }
      const parsed = this.decode(data);
      if (parsed !== null) {
        out.push(parsed);
      }
    }
    return out;
  }

  private decode(data: string): ApiEvent | null {
    let value: unknown;
    try {
      value = JSON.parse(data);
    } catch {
      this.warn(`skipping malformed event: ${data.slice(0, 120)}`);
      return null;
    }
    const candidate = value as { event?: unknown; payload?: unknown };
    if (
      typeof candidate.event !== "string" ||
      typeof candidate.payload !== "object" ||
      candidate.payload === null ||
      Array.isArray(candidate.payload)
    ) {
      this.warn(`skipping event with unexpected shape: ${data.slice(0, 120)}`);
      return null;
    }
    return {
      event: candidate.event,
      payload: candidate.payload as Record<string, unknown>,
    };
  }
}

/** Decode a fetch response body into text chunks for the parser. */
export async function* bodyChunks(res: Response): AsyncIterable<string> {
  if (!res.body) {
    return;
  }
  const reader = res.body.getReader();
  const decoder = new TextDecoder();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) {
      break;
    }
    yield decoder.decode(value, { stream: true });
  }
}
