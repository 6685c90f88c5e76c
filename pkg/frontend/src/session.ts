/** Annotation session state machine, DOM-free so it can be driven headlessly. */

import type { AnnotationItem, ApiClient, Label } from './api.js';

export type Phase = 'loading' | 'judging' | 'done' | 'error';

export interface SessionState {
  phase: Phase;
  /** The item awaiting judgment; set exactly when phase is "judging". */
  item: AnnotationItem | null;
  /** Judgments submitted in this session. */
  judged: number;
  /** Items still unjudged by this annotator, including the current one. */
  remaining: number;
  error: string | null;
}

type MinimalApi = Pick<ApiClient, 'next' | 'judge'>;

/**
 * Pulls items one at a time and submits judgments; every transition is
 * reported through onChange. A failed request parks the session in the
 * "error" phase; start() retries from there.
 */
export class AnnotationSession {
  private state: SessionState = {
    phase: 'loading',
    item: null,
    judged: 0,
    remaining: 0,
    error: null,
  };

  constructor(
    private readonly api: MinimalApi,
    readonly annotator: string,
    private readonly onChange: (state: SessionState) => void = () => {},
  ) {}

  get current(): SessionState {
    return this.state;
  }

  async start(): Promise<void> {
    this.set({ phase: 'loading', item: null, error: null });
    await this.advance();
  }

  /** Submit a judgment for the current item and pull the next one. */
  async judge(label: Label): Promise<void> {
    const item = this.state.item;
    if (this.state.phase !== 'judging' || item === null) {
      return;
    }
    this.set({ phase: 'loading' });
    try {
      await this.api.judge(this.annotator, item.sample_id, label);
    } catch (err) {
      this.set({ phase: 'error', error: messageOf(err) });
      return;
    }
    this.set({ judged: this.state.judged + 1, item: null });
    await this.advance();
  }

  private async advance(): Promise<void> {
    try {
      const next = await this.api.next(this.annotator);
      if (next.done) {
        this.set({ phase: 'done', item: null, remaining: 0 });
      } else {
        const { done: _done, ...item } = next;
        this.set({ phase: 'judging', item, remaining: item.remaining });
      }
    } catch (err) {
      this.set({ phase: 'error', error: messageOf(err) });
    }
  }

  private set(patch: Partial<SessionState>): void {
    this.state = { ...this.state, ...patch };
    this.onChange(this.state);
  }
}

/** Keyboard layout: j/1 = reasonable, k/2 = unreasonable. */
export function labelForKey(key: string): Label | null {
  switch (key.toLowerCase()) {
    case 'j':
    case '1':
      return 'reasonable';
    case 'k':
    case '2':
      return 'unreasonable';
    default:
      return null;
  }
}

function messageOf(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}
