/** DOM layer: renders session state and binds the keyboard shortcuts. */

import type { AcceptanceReport, ApiClient, Progress } from './api.js';
import type { AnnotationSession, SessionState } from './session.js';
import { labelForKey } from './session.js';

type ReportApi = Pick<ApiClient, 'acceptance' | 'progress'>;

const IGNORED_TAGS = new Set(['INPUT', 'TEXTAREA', 'SELECT']);

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className: string,
  text = '',
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  node.className = className;
  if (text) node.textContent = text;
  return node;
}

function percent(value: number | null): string {
  return value === null ? '—' : `${(value * 100).toFixed(1)}%`;
}

export class AnnotationView {
  private keyHandler: ((event: KeyboardEvent) => void) | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly session: AnnotationSession,
    private readonly api: ReportApi,
  ) {}

  /** Attach the window key bindings; returns a detach function. */
  bindKeys(win: Window = window): () => void {
    this.keyHandler = (event: KeyboardEvent) => {
      const target = event.target as HTMLElement | null;
      if (target && (IGNORED_TAGS.has(target.tagName) || target.isContentEditable)) {
        return;
      }
      const state = this.session.current;
      if (state.phase === 'error' && event.key === 'Enter') {
        event.preventDefault();
        void this.session.start();
        return;
      }
      const label = labelForKey(event.key);
      if (label && state.phase === 'judging') {
        event.preventDefault();
        void this.session.judge(label);
      }
    };
    win.addEventListener('keydown', this.keyHandler);
    return () => {
      if (this.keyHandler) win.removeEventListener('keydown', this.keyHandler);
    };
  }

  update(state: SessionState): void {
    this.root.replaceChildren(this.header(state), this.body(state));
  }

  private header(state: SessionState): HTMLElement {
    const head = el('header', 'bar');
    head.append(
      el('span', 'bar-title', '三元组标注 · triple annotation'),
      el('span', 'bar-annotator', this.session.annotator),
      el(
        'span',
        'bar-progress',
        state.phase === 'judging'
          ? `已判 ${state.judged} · 剩余 ${state.remaining}`
          : `已判 ${state.judged}`,
      ),
    );
    return head;
  }

  private body(state: SessionState): HTMLElement {
    switch (state.phase) {
      case 'loading':
        return el('main', 'panel panel-muted', '加载中… loading');
      case 'error': {
        const panel = el('main', 'panel panel-error');
        panel.append(
          el('p', 'error-text', `请求失败：${state.error ?? '未知错误'}`),
          this.button('retry', '重试 (Enter)', () => void this.session.start()),
        );
        return panel;
      }
      case 'done': {
        const panel = el('main', 'panel panel-done');
        panel.append(el('h2', 'done-title', '全部完成 🎉'));
        const summary = el('dl', 'summary', '');
        panel.append(summary);
        void this.fillSummary(summary);
        return panel;
      }
      case 'judging': {
        const item = state.item;
        if (item === null) return el('main', 'panel panel-muted', '…');
        const panel = el('main', 'panel panel-item');
        panel.append(
          el('p', 'sentence', item.relation_sentence),
          this.breakdown(item.head, item.relation, item.tail),
          el('p', 'question', '这条常识是否合理？'),
        );
        const buttons = el('div', 'buttons');
        buttons.append(
          this.button('yes', '合理 reasonable (J)', () =>
            void this.session.judge('reasonable'),
          ),
          this.button('no', '不合理 unreasonable (K)', () =>
            void this.session.judge('unreasonable'),
          ),
        );
        panel.append(buttons);
        return panel;
      }
    }
  }

  private breakdown(head: string, relation: string, tail: string): HTMLElement {
    const table = el('div', 'breakdown');
    for (const [label, value] of [
      ['head', head],
      ['relation', relation],
      ['tail', tail],
    ] as const) {
      const row = el('div', 'breakdown-row');
      row.append(el('span', 'breakdown-label', label), el('span', 'breakdown-value', value));
      table.append(row);
    }
    return table;
  }

  private button(kind: string, text: string, onClick: () => void): HTMLButtonElement {
    const button = el('button', `btn btn-${kind}`, text);
    button.type = 'button';
    button.addEventListener('click', onClick);
    return button;
  }

  private async fillSummary(target: HTMLElement): Promise<void> {
    let acceptance: AcceptanceReport;
    let progress: Progress;
    try {
      [acceptance, progress] = await Promise.all([this.api.acceptance(), this.api.progress()]);
    } catch {
      target.append(el('dd', 'summary-error', '无法载入统计 · stats unavailable'));
      return;
    }
    const mine = acceptance.per_annotator[this.session.annotator] ?? null;
    const rows: Array<[string, string]> = [
      ['你的接受率 yours', percent(mine)],
      ['总体接受率 overall', percent(acceptance.overall)],
      ['覆盖率 coverage', percent(progress.coverage)],
      ['已标注条目 items', `${acceptance.annotated_items}/${acceptance.total_items}`],
    ];
    for (const [label, value] of rows) {
      target.append(el('dt', 'summary-label', label), el('dd', 'summary-value', value));
    }
  }
}
