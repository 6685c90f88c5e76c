import { describe, expect, it } from 'vitest';

import type { Label, NextResponse } from '../src/api.js';
import { AnnotationSession, labelForKey, type SessionState } from '../src/session.js';

function pending(id: string, remaining: number): NextResponse {
  return {
    done: false,
    sample_id: id,
    head: `PersonX事件${id}`,
    relation: 'xWant',
    relation_sentence: `PersonX事件${id}之后，PersonX想要休息`,
    tail: '休息',
    remaining,
  };
}

const DONE: NextResponse = { done: true, remaining: 0 };

/** Structural stand-in for the ApiClient surface the session uses. */
class FakeApi {
  judgments: Array<{ annotator: string; sampleId: string; label: Label }> = [];
  failNext = false;
  failJudge = false;

  constructor(private queue: NextResponse[]) {}

  async next(_annotator: string): Promise<NextResponse> {
    if (this.failNext) throw new Error('next unavailable');
    const head = this.queue.shift();
    if (!head) throw new Error('fake queue exhausted');
    return head;
  }

  async judge(annotator: string, sampleId: string, label: Label): Promise<void> {
    if (this.failJudge) throw new Error('judgment rejected');
    this.judgments.push({ annotator, sampleId, label });
  }
}

describe('AnnotationSession', () => {
  it('walks items in order and lands in the done phase', async () => {
    const api = new FakeApi([pending('s0001', 2), pending('s0002', 1), DONE]);
    const session = new AnnotationSession(api, 'alice');

    await session.start();
    expect(session.current.phase).toBe('judging');
    expect(session.current.item?.sample_id).toBe('s0001');
    expect(session.current.remaining).toBe(2);

    await session.judge('reasonable');
    expect(session.current.item?.sample_id).toBe('s0002');

    await session.judge('unreasonable');
    expect(session.current.phase).toBe('done');
    expect(session.current.judged).toBe(2);
    expect(session.current.remaining).toBe(0);
    expect(api.judgments).toEqual([
      { annotator: 'alice', sampleId: 's0001', label: 'reasonable' },
      { annotator: 'alice', sampleId: 's0002', label: 'unreasonable' },
    ]);
  });

  it('reports every transition through onChange', async () => {
    const api = new FakeApi([pending('s0001', 1), DONE]);
    const phases: string[] = [];
    const session = new AnnotationSession(api, 'alice', (s: SessionState) =>
      phases.push(s.phase),
    );
    await session.start();
    await session.judge('reasonable');
    expect(phases).toEqual(['loading', 'judging', 'loading', 'loading', 'done']);
  });

  it('ignores judge calls outside the judging phase', async () => {
    const api = new FakeApi([DONE]);
    const session = new AnnotationSession(api, 'alice');
    await session.judge('reasonable'); // before start
    await session.start();
    await session.judge('reasonable'); // already done
    expect(api.judgments).toEqual([]);
    expect(session.current.judged).toBe(0);
  });

  it('parks in the error phase when next fails and recovers on start', async () => {
    const api = new FakeApi([pending('s0001', 1), DONE]);
    const session = new AnnotationSession(api, 'alice');
    api.failNext = true;
    await session.start();
    expect(session.current.phase).toBe('error');
    expect(session.current.error).toContain('next unavailable');

    api.failNext = false;
    await session.start();
    expect(session.current.phase).toBe('judging');
    expect(session.current.item?.sample_id).toBe('s0001');
  });

  it('keeps the current item when a judgment fails', async () => {
    const api = new FakeApi([pending('s0001', 1)]);
    const session = new AnnotationSession(api, 'alice');
    await session.start();
    api.failJudge = true;
    await session.judge('reasonable');
    expect(session.current.phase).toBe('error');
    expect(session.current.judged).toBe(0);
    expect(session.current.item?.sample_id).toBe('s0001');
  });
});

describe('labelForKey', () => {
  it.each([
    ['j', 'reasonable'],
    ['J', 'reasonable'],
    ['1', 'reasonable'],
    ['k', 'unreasonable'],
    ['K', 'unreasonable'],
    ['2', 'unreasonable'],
  ] as const)('maps %s to %s', (key, label) => {
    expect(labelForKey(key)).toBe(label);
  });

  it.each([['x'], ['3'], ['Enter'], [' '], ['Escape']])('maps %s to null', (key) => {
    expect(labelForKey(key)).toBeNull();
  });
});
