import type { ApiClient } from "./api.js";
import { debounce, type Debounced } from "./debounce.js";
import { MAX_ROWS } from "./render.js";
import {
  acceptTop,
  beginCompletion,
  beginScore,
  failCompletion,
  failScore,
  initialState,
  insertAtCaret,
  resolveCompletion,
  resolveScore,
  setCaret,
  setContext,
  setNote,
  type EditorState,
} from "./state.js";
import type { RecordContextJson } from "./types.js";

export const DEBOUNCE_MS = 150;

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

/** DOM-free editor core: owns the state, debounces the service calls, and
 * reports every state change to the listener. */
export class Editor {
  private state: EditorState;
  private readonly completer: Debounced;
  private readonly scorer: Debounced;

  constructor(
    private readonly api: ApiClient,
    context?: RecordContextJson,
    private readonly onChange: (s: EditorState) => void = () => {},
    debounceMs: number = DEBOUNCE_MS,
  ) {
    this.state = initialState(context);
    this.completer = debounce(debounceMs, () => void this.fetchSuggestions());
    this.scorer = debounce(debounceMs, () => void this.refreshFlags());
  }

  getState(): EditorState {
    return this.state;
  }

  private set(next: EditorState): void {
    if (next !== this.state) {
      this.state = next;
      this.onChange(next);
    }
  }

  /** Keystrokes land here: update the buffer, then debounce the fetches. */
  input(note: string, caret: number): void {
    this.set(setNote(this.state, note, caret));
    this.completer.trigger();
    if (note.length > 0) this.scorer.trigger();
    else this.scorer.cancel();
  }

  /** Programmatic typing at the caret (same debouncing as input). */
  type(text: string): void {
    this.set(insertAtCaret(this.state, text));
    this.completer.trigger();
    this.scorer.trigger();
  }

  moveCaret(caret: number): void {
    this.set(setCaret(this.state, caret));
  }

  /** Context-panel apply: refetch right away, the context changed. */
  applyContext(context: RecordContextJson): void {
    this.set(setContext(this.state, context));
    this.completer.cancel();
    void this.fetchSuggestions();
    if (this.state.note.length > 0) void this.refreshFlags();
  }

  /** Tab: insert the top suggestion and refetch immediately. */
  async acceptSuggestion(): Promise<void> {
    const before = this.state;
    const next = acceptTop(before);
    if (next === before) return; // nothing to accept
    this.set(next);
    this.completer.cancel();
    this.scorer.cancel();
    await Promise.all([this.fetchSuggestions(), this.refreshFlags()]);
  }

  async fetchSuggestions(): Promise<void> {
    const begun = beginCompletion(this.state);
    this.set(begun.state);
    const { note, caret, context } = begun.state;
    try {
      const res = await this.api.complete(context, note.slice(0, caret), MAX_ROWS);
      this.set(resolveCompletion(this.state, begun.id, res));
    } catch (err) {
      this.set(failCompletion(this.state, begun.id, describe(err)));
    }
  }

  async refreshFlags(): Promise<void> {
    if (this.state.note.length === 0) return;
    const begun = beginScore(this.state);
    this.set(begun.state);
    const { note, context } = begun.state;
    try {
      const res = await this.api.score(context, note);
      this.set(resolveScore(this.state, begun.id, note, res));
    } catch (err) {
      this.set(failScore(this.state, begun.id, describe(err)));
    }
  }
}
