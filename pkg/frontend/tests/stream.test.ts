import { readFileSync } from "node:fs";

import { describe, expect, it, vi } from "vitest";

import type { ApiEvent } from "../src/events.js";
import { consumeStream } from "../src/stream.js";
import { foldStream } from "../src/viewstate.js";

const GOLDEN: ApiEvent[] = JSON.parse(
  readFileSync(new URL("./fixtures/golden_stream.json", import.meta.url), "utf-8"),
);

const QUESTION = "How many singers do we have?";

function toWire(events: ApiEvent[]): string {
  return events.map((e) => `data: ${JSON.stringify(e)}\n\n`).join("");
}

async function* chunked(text: string, size: number): AsyncIterable<string> {
  for (let i = 0; i < text.length; i += size) {
    yield text.slice(i, i + size);
  }
}

async function* failAfter(text: string, size: number): AsyncIterable<string> {
  yield* chunked(text, size);
  throw new Error("connection reset");
}

describe("consumeStream", () => {
  it("completes and matches the plain fold of the same events", async () => {
    const outcome = await consumeStream(chunked(toWire(GOLDEN), 17), QUESTION);
    expect(outcome.completed).toBe(true);
    expect(outcome.turn).toEqual(foldStream(QUESTION, GOLDEN));
  });

  it("fires onUpdate once per event", async () => {
    const updates = vi.fn();
    await consumeStream(chunked(toWire(GOLDEN), 1000), QUESTION, updates);
    expect(updates).toHaveBeenCalledTimes(GOLDEN.length);
  });

  it("drops the turn when the source ends before the closing event", async () => {
    const partial = GOLDEN.slice(0, 5); // stages and a token, no done
    const outcome = await consumeStream(chunked(toWire(partial), 32), QUESTION);
    expect(outcome.completed).toBe(false);
    expect(outcome.turn.status).toBe("dropped");
    expect(outcome.turn.streamedSql.length).toBeGreaterThan(0);
  });

  it("drops the turn when the source throws mid-stream", async () => {
    const partial = toWire(GOLDEN.slice(0, 3));
    const outcome = await consumeStream(failAfter(partial, 16), QUESTION);
    expect(outcome.completed).toBe(false);
    expect(outcome.turn.status).toBe("dropped");
  });

  it("skips malformed events and still completes", async () => {
    const warn = vi.fn();
    const wire =
      toWire(GOLDEN.slice(0, 2)) + "data: !!!\n\n" + toWire(GOLDEN.slice(2));
    const outcome = await consumeStream(chunked(wire, 64), QUESTION, () => {}, warn);
    expect(outcome.completed).toBe(true);
    expect(outcome.turn).toEqual(foldStream(QUESTION, GOLDEN));
    expect(warn).toHaveBeenCalledTimes(1);
  });
});
