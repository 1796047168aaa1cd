/** Turn-stream consumption: parse, fold, notify. */

import { SseParser } from "./events.js";
import {
  type ChatViewTurn,
  foldEvent,
  markDropped,
  newTurn,
} from "./viewstate.js";

export interface StreamOutcome {
  turn: ChatViewTurn;
  completed: boolean;
}

/**
 * Fold a turn's event source into successive view states, calling onUpdate
 * after every event. A source that ends or fails before the closing event
 * leaves the turn dropped, which the caller surfaces as a retry banner.
 */
export async function consumeStream(
  source: AsyncIterable<string>,
  question: string,
  onUpdate: (turn: ChatViewTurn) => void = () => {},
  warn?: (message: string) => void,
): Promise<StreamOutcome> {
  const parser = new SseParser(warn);
  let turn = newTurn(question);
  try {
    for await (const chunk of source) {
      for (const ev of parser.push(chunk)) {
        turn = foldEvent(turn, ev);
        onUpdate(turn);
      }
    }
  } catch {
    // treated the same as an early end of stream
  }
  if (turn.status !== "done") {
    turn = markDropped(turn);
    onUpdate(turn);
    return { turn, completed: false };
  }
  return { turn, completed: true };
}
