// @vitest-environment jsdom
import { beforeEach, describe, expect, it, vi } from 'vitest';

import type { AcceptanceReport, Label, NextResponse, Progress } from '../src/api.js';
import { AnnotationSession } from '../src/session.js';
import { AnnotationView } from '../src/ui.js';

function pending(id: string, remaining: number): NextResponse {
  return {
    done: false,
    sample_id: id,
    head: `PersonX出门跑步${id}`,
    relation: 'HinderedBy',
    relation_sentence: `PersonX出门跑步${id}的发生可能被下大雨阻碍`,
    tail: '下大雨',
    remaining,
  };
}

class FakeApi {
  judgments: Array<{ sampleId: string; label: Label }> = [];
  constructor(private queue: NextResponse[]) {}
  async next(_annotator: string): Promise<NextResponse> {
    const head = this.queue.shift();
    if (!head) throw new Error('queue exhausted');
    return head;
  }
  async judge(_annotator: string, sampleId: string, label: Label): Promise<void> {
    this.judgments.push({ sampleId, label });
  }
}

const report: AcceptanceReport = {
  per_annotator: { tester: 0.75 },
  overall: 0.75,
  per_stratum: { HinderedBy_raw: 0.75 },
  majority_acceptance: 0.75,
  coverage: 1.0,
  annotated_items: 4,
  total_items: 4,
};
const progress: Progress = {
  total_items: 4,
  annotators: ['tester'],
  completed: { tester: 4 },
  coverage: 1.0,
};
const reportApi = {
  acceptance: async () => report,
  progress: async () => progress,
};

function mount(queue: NextResponse[]): { api: FakeApi; session: AnnotationSession; root: HTMLElement } {
  const root = document.createElement('div');
  document.body.replaceChildren(root);
  const api = new FakeApi(queue);
  let view: AnnotationView;
  const session = new AnnotationSession(api, 'tester', (state) => view.update(state));
  view = new AnnotationView(root, session, reportApi);
  view.bindKeys();
  return { api, session, root };
}

beforeEach(() => {
  document.body.replaceChildren();
});

describe('AnnotationView', () => {
  it('renders the relation sentence, breakdown and progress', async () => {
    const { root, session } = mount([pending('s0000', 3)]);
    await session.start();
    expect(root.querySelector('.sentence')?.textContent).toContain('下大雨阻碍');
    const values = [...root.querySelectorAll('.breakdown-value')].map((n) => n.textContent);
    expect(values).toEqual(['PersonX出门跑步s0000', 'HinderedBy', '下大雨']);
    expect(root.querySelector('.bar-progress')?.textContent).toBe('已判 0 · 剩余 3');
  });

  it('judges with the j/k keys and advances', async () => {
    const { api, session, root } = mount([pending('s0000', 2), pending('s0001', 1), { done: true, remaining: 0 }]);
    await session.start();

    window.dispatchEvent(new KeyboardEvent('keydown', { key: 'j' }));
    await vi.waitFor(() => expect(session.current.item?.sample_id).toBe('s0001'));
    expect(api.judgments[0]).toEqual({ sampleId: 's0000', label: 'reasonable' });

    window.dispatchEvent(new KeyboardEvent('keydown', { key: 'k' }));
    await vi.waitFor(() => expect(api.judgments).toHaveLength(2));
    expect(api.judgments[1]).toEqual({ sampleId: 's0001', label: 'unreasonable' });
    await vi.waitFor(() => expect(root.querySelector('.panel-done')).not.toBeNull());
  });

  it('ignores shortcut keys typed into form fields', async () => {
    const { api, session, root } = mount([pending('s0000', 1)]);
    await session.start();
    const input = document.createElement('input');
    root.append(input);
    input.dispatchEvent(new KeyboardEvent('keydown', { key: 'j', bubbles: true }));
    await new Promise((r) => setTimeout(r, 10));
    expect(api.judgments).toHaveLength(0);
  });

  it('clicking the buttons submits judgments too', async () => {
    const { api, session, root } = mount([pending('s0000', 1), { done: true, remaining: 0 }]);
    await session.start();
    (root.querySelector('.btn-no') as HTMLButtonElement).click();
    await vi.waitFor(() => expect(api.judgments).toHaveLength(1));
    expect(api.judgments[0]).toEqual({ sampleId: 's0000', label: 'unreasonable' });
  });

  it('shows the acceptance summary when done', async () => {
    const { session, root } = mount([{ done: true, remaining: 0 }]);
    await session.start();
    await vi.waitFor(() => {
      const values = [...root.querySelectorAll('.summary-value')].map((n) => n.textContent);
      expect(values).toEqual(['75.0%', '75.0%', '100.0%', '4/4']);
    });
  });

  it('renders errors with a retry control', async () => {
    const { session, root } = mount([]);
    await session.start(); // queue exhausted -> error
    expect(root.querySelector('.panel-error')).not.toBeNull();
    expect(root.querySelector('.error-text')?.textContent).toContain('queue exhausted');
    expect(root.querySelector('.btn-retry')).not.toBeNull();
  });
});
