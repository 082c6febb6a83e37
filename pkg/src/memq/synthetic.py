"""Seeded generator of small personal-memory corpora with QA items.

Characters carry Latin (pinyin) names; facts are Chinese. Every anchor
fact is drawn without replacement from per-character pools, so each one
occurs in exactly one memory item of its character. Questions repeat a cue
from their target item (a peer's name, an activity, a dialogue partner plus
a phrase) but never the facts the answer must contain.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from pathlib import Path

from .store import (
    Anchor,
    CharacterMemory,
    Dialogue,
    Event,
    MemoryDatabase,
    MemType,
    QAItem,
    Relationship,
    Subtype,
    Turn,
    dump_qa,
    segment_character,
    serialize_database,
)
from .text import normalize

SURNAMES = (
    "Wang Li Zhang Liu Chen Yang Zhao Huang Zhou Wu Xu Sun Hu Zhu Gao "
    "Lin He Guo Ma Luo Liang Song Zheng Xie Han Tang Feng Yu Dong Xiao"
).split()
GIVEN = (
    "Wei Fang Na Min Jing Lei Jie Tao Yan Ying Hua Ping Gang Hui Bo Ning "
    "Qiang Xin Yu Ming Chao Dan Kai Lan Rui Shan Ting Xuan Yi Zhen "
    "Hao Jun Lu Mei Qing Song Tian Xia Yun Zhi"
).split()

CITIES = "北京 上海 杭州 成都 西安 南京 苏州 武汉 重庆 厦门 青岛 大连 昆明 长沙 天津 桂林 拉萨 洛阳 扬州 丽江".split()
VENUES = "图书馆 博物馆 美术馆 体育馆 植物园 动物园 游乐园 海洋馆 音乐厅 大剧院 科技馆 老街 古镇 湿地公园 夜市 书店 咖啡馆 火车站 码头 天文台".split()
COLORS = "红色 蓝色 绿色 黄色 白色 黑色 紫色 灰色 粉色 橙色 棕色 金色 银色".split()
OBJECTS = "雨伞 围巾 相机 手表 钢笔 背包 台灯 茶杯 吉他 风筝 地球仪 笔记本 耳机 帽子 花瓶 闹钟 自行车 毛毯 钱包 画册".split()
ACTIVITIES = (
    "参观展览 学习陶艺 看话剧 逛庙会 划船 野餐 听音乐会 爬山 看电影 打羽毛球 "
    "包饺子 做志愿者 钓鱼 露营 骑行 滑雪 品尝小吃 看日出 练瑜伽 学做蛋糕"
).split()
CATEGORIES = "同事 大学同学 邻居 表哥 好朋友 前同事 健身搭档 导师 学生 发小".split()

OCCUPATIONS = "摄影师 医生 教师 检察官 建筑师 程序员 记者 厨师 护士 审计师 设计师 翻译官 工程师 画家 作家 演员 飞行员 药剂师 兽医 导游".split()
UNIVERSITIES = "北京大学 清华大学 复旦大学 浙江大学 南京大学 武汉大学 中山大学 四川大学 厦门大学 山东大学".split()
MAJORS = "计算机 新闻学 建筑学 临床医学 法学 会计学 历史学 物理学 生物学 金融学".split()
AWARDS = "年度优秀员工奖 青年创新奖 最佳新人奖 金牌讲师奖 杰出贡献奖 行业新星奖 社区服务奖 技术突破奖".split()
ACHIEVEMENTS = "出版了个人作品集 完成了全程马拉松 创办了读书会 申请到一项专利 举办了个人画展 翻译了三本小说 组建了一支乐队 带队拿下省赛冠军".split()
BRANDS = "星河 远航 晨光 蓝海 华锦 青松 明德 长风".split()
EMPLOYER_KINDS = "科技公司 人民医院 实验中学 律师事务所 设计工作室 出版社 电视台 建筑集团".split()
HAIR = "留着齐肩短发 戴着黑框眼镜 留着一头卷发 总是扎着马尾 留着络腮胡".split()
ROLE_MODELS = "鲁迅 李白 杜甫 苏轼 孔子 居里夫人 爱因斯坦 钱学森 袁隆平 屠呦呦 梅兰芳 齐白石".split()
NICK_CHARS = "宝 虎 乐 豆 米 鱼 星 果".split()

PRO_QUESTIONS = ("{name}的{attr}是什么?", "请问{name}的{attr}是什么?", "你知道{name}的{attr}是什么吗?")
SR_QUESTIONS = ("{name}和{peer}是什么关系?", "{peer}与{name}之间是什么关系?", "请问{peer}和{name}是什么关系?")
EVT_QUESTIONS = (
    "{name}和{cp}一起{act}是在什么时候、什么地方?",
    "那次和{cp}一起{act}，是什么时候在哪里发生的?",
    "{name}回忆一下和{cp}一起去{act}的经历，当时是哪天、在哪里?",
)

# (utterance, question, fact kinds)
DLG_TEMPLATES = (
    ("我打算{0}去{1}旅行。", "{spk}跟{other}说打算什么时候去哪里旅行?", ("date", "place")),
    ("我上周在{0}弄丢了{1}。", "{spk}对{other}说上周在哪里弄丢了东西?丢的是什么?", ("place", "object")),
    ("我{0}在{1}买到了{2}。", "{spk}和{other}聊天时提到哪天在哪里买到了什么?", ("date", "place", "object")),
    ("我准备把{0}寄到{1}。", "{spk}对{other}说准备把什么寄到哪里?", ("object", "place")),
    ("我们约好{0}在{1}碰头吧。", "{spk}和{other}约好哪天在哪里碰头?", ("date", "place")),
    ("我一直珍藏着{0}，那是{1}收到的。", "{spk}告诉{other}自己一直珍藏着什么，是哪天收到的?", ("object", "date")),
    ("我在{0}报名了夜校课程，{1}开课。", "{spk}对{other}说在哪里报名了夜校课程，哪天开课?", ("place", "date")),
    ("我家里新添了{0}。", "{spk}在聊天中告诉{other}家里新添了什么?", ("object",)),
)


@dataclass(frozen=True)
class GenSpec:
    seed: int = 42
    n_characters: int = 20
    relationships_per_char: int = 9
    events_per_char: int = 10
    dialogues_per_event: int = 1
    turns_per_dialogue: int = 4
    qa_per_char: int = 20
    anchor_per_qa: int = 3

    def __post_init__(self):
        for name, value in vars(self).items():
            if name != "seed" and value < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_characters > len(SURNAMES) * len(GIVEN):
            raise ValueError("too many characters for the name pool")


@dataclass(frozen=True)
class GeneratedCorpus:
    db: MemoryDatabase
    qa: list[QAItem]
    labeled: list[tuple[str, MemType]]


class _Pool:
    """Draw-without-replacement over a shuffled product of vocabularies."""

    def __init__(self, rng: random.Random, values):
        self._values = list(values)
        rng.shuffle(self._values)

    def take(self) -> str:
        if not self._values:
            raise ValueError("fact pool exhausted; reduce per-character counts")
        return self._values.pop()


def _dates(rng: random.Random) -> _Pool:
    return _Pool(
        rng,
        (f"{y}年{m:02d}月{d:02d}日" for y in range(2008, 2024) for m in range(1, 13) for d in range(1, 29)),
    )


@dataclass
class _Target:
    """A memory element a question may be asked about."""

    provenance: str
    subtype: Subtype
    question: str
    parts: list[tuple[str, bool]]  # answer pieces; True marks an anchor


def _assemble(parts: list[tuple[str, bool]], limit: int) -> tuple[str, tuple[Anchor, ...]]:
    out, anchors, pos, n = [], [], 0, 0
    for text, is_anchor in parts:
        if is_anchor and n < limit:
            anchors.append(Anchor(text, pos, pos + len(text)))
            n += 1
        out.append(text)
        pos += len(text)
    return "".join(out), tuple(anchors)


def _character(rng: random.Random, name: str, others: list[str], spec: GenSpec):
    places = _Pool(rng, (c + v for c in CITIES for v in VENUES))
    objects = _Pool(rng, (c + o for c in COLORS for o in OBJECTS))
    dates = _dates(rng)
    names = iter(others)
    targets: list[_Target] = []
    pick = rng.choice

    age = rng.randint(22, 65)
    height = rng.randint(152, 192)
    hair = pick(HAIR)
    achievement = pick(ACHIEVEMENTS)
    univ, major = pick(UNIVERSITIES), pick(MAJORS)
    occupation = pick(OCCUPATIONS)
    employer = pick(CITIES) + pick(BRANDS) + pick(EMPLOYER_KINDS)
    award = pick(AWARDS)
    role_model = pick(ROLE_MODELS)
    profile = {
        "性别": pick(("男", "女")),
        "昵称": "小" + pick(NICK_CHARS),
        "年龄": f"{age}岁",
        "国籍": "中国",
        "外貌": f"身高{height}厘米，{hair}",
        "成就": achievement,
        "教育": f"毕业于{univ}{major}专业",
        "职业": occupation,
        "工作单位": employer,
        "奖项": f"获得过{award}",
        "偶像": role_model,
    }
    pro_answers = {
        "年龄": [(f"{name}今年", False), (f"{age}岁", True), ("。", False)],
        "外貌": [(f"{name}身高", False), (f"{height}厘米", True), ("，", False), (hair, True), ("。", False)],
        "成就": [(f"{name}最大的成就是", False), (achievement, True), ("。", False)],
        "教育": [(f"{name}毕业于", False), (univ, True), ("，读的是", False), (f"{major}专业", True), ("。", False)],
        "职业": [(f"{name}是一名", False), (occupation, True), ("。", False)],
        "工作单位": [(f"{name}在", False), (employer, True), ("工作。", False)],
        "奖项": [(f"{name}获得过", False), (award, True), ("。", False)],
        "偶像": [(f"{name}的偶像是", False), (role_model, True), ("。", False)],
    }
    for attr, parts in pro_answers.items():
        q = pick(PRO_QUESTIONS).format(name=name, attr=attr)
        targets.append(_Target(f"profile/{attr}", Subtype.PRO, q, parts))

    relationships = []
    for i in range(spec.relationships_per_char):
        peer, cat = next(names), pick(CATEGORIES)
        date, place, obj = dates.take(), places.take(), objects.take()
        relationships.append(
            Relationship(
                peer_name=peer,
                category=cat,
                description=f"{peer}与{name}的关系是{cat}。两人于{date}在{place}相识，{peer}曾送给{name}一个{obj}。",
            )
        )
        q = pick(SR_QUESTIONS).format(name=name, peer=peer)
        parts = [
            (f"{peer}是{name}的{cat}，两人于", False), (date, True), ("在", False), (place, True),
            (f"相识，{peer}还送过一个", False), (obj, True), ("。", False),
        ]
        targets.append(_Target(f"relationship/{i}", Subtype.SR, q, parts))

    acts = list(ACTIVITIES)
    rng.shuffle(acts)
    events, dialogues = [], []
    for e in range(spec.events_per_char):
        eid = f"e{e + 1:02d}"
        act = acts[e % len(acts)]
        cp = next(names)
        date, place, obj = dates.take(), places.take(), objects.take()
        events.append(
            Event(
                event_id=eid,
                topic=act,
                narrative=f"{date}，{name}和{cp}一起去{place}{act}，{name}在那里买了一个{obj}。",
            )
        )
        q = pick(EVT_QUESTIONS).format(name=name, cp=cp, act=act)
        parts = [
            (date, True), (f"，{name}和{cp}在", False), (place, True),
            (f"{act}，还买了一个", False), (obj, True), ("。", False),
        ]
        targets.append(_Target(f"event/{eid}", Subtype.EVT, q, parts))

        for d in range(spec.dialogues_per_event):
            did = f"{eid}-d{d + 1}"
            partner = next(names)
            turns = []
            templates = list(DLG_TEMPLATES)
            rng.shuffle(templates)
            for t in range(spec.turns_per_dialogue):
                spk, other = (name, partner) if t % 2 == 0 else (partner, name)
                if t == 0:
                    turns.append(Turn(spk, f"{other}，你还记得我去{act}的那次吗?"))
                    continue
                utt_t, q_t, kinds = templates[(t - 1) % len(templates)]
                facts = [{"date": dates, "place": places, "object": objects}[k].take() for k in kinds]
                turns.append(Turn(spk, f"{other}，" + utt_t.format(*facts)))
                if t - 1 >= len(templates):
                    continue  # template reused: cue no longer unique in this dialogue
                pre, rest = utt_t.split("{0}", 1)
                parts = [(f"{spk}说：{pre}", False)]
                for i, fact in enumerate(facts):
                    head, _, rest = rest.partition(f"{{{i + 1}}}") if i + 1 < len(facts) else (rest, "", "")
                    parts.append((fact, True))
                    parts.append((head, False))
                targets.append(
                    _Target(f"dialogue/{did}/{t}", Subtype.DLG, q_t.format(spk=spk, other=other), parts)
                )
            dialogues.append(Dialogue(dialogue_id=did, turns=tuple(turns), event_id=eid))

    cm = CharacterMemory(name, profile, tuple(relationships), tuple(events), tuple(dialogues))
    return cm, targets


def generate_corpus(spec: GenSpec = GenSpec()) -> GeneratedCorpus:
    rng = random.Random(spec.seed)
    all_names = [f"{s} {g}" for s, g in itertools.product(SURNAMES, GIVEN)]
    rng.shuffle(all_names)
    char_names = all_names[: spec.n_characters]

    characters: dict[str, CharacterMemory] = {}
    qa: list[QAItem] = []
    labeled: list[tuple[str, MemType]] = []
    for ci, name in enumerate(char_names):
        others = [n for n in all_names if n != name]
        rng.shuffle(others)
        cm, targets = _character(rng, name, others, spec)
        characters[name] = cm
        items = {it.provenance: it for it in segment_character(cm)}

        sem = [t for t in targets if t.subtype.mem_type == MemType.SEMANTIC]
        epi = [t for t in targets if t.subtype.mem_type == MemType.EPISODIC]
        n_sem = min(len(sem), spec.qa_per_char // 2)
        n_epi = min(len(epi), spec.qa_per_char - n_sem)
        n_sem = min(len(sem), spec.qa_per_char - n_epi)
        chosen = rng.sample(sem, n_sem) + rng.sample(epi, n_epi)
        for qi, t in enumerate(chosen):
            item = items[t.provenance]
            answer, anchors = _assemble(t.parts, spec.anchor_per_qa)
            qa.append(
                QAItem(
                    qa_id=f"c{ci + 1:03d}-q{qi + 1:03d}",
                    character_id=name,
                    question=t.question,
                    answer=answer,
                    reference_memory_texts=(item.text,),
                    reference_item_ids=(item.item_id,),
                    anchors=anchors,
                )
            )
            labeled.append((t.question, t.subtype.mem_type))
        _check_unique_anchors(name, list(items.values()), qa[len(qa) - len(chosen):])
    return GeneratedCorpus(MemoryDatabase(characters), qa, labeled)


def _check_unique_anchors(name, items, qa) -> None:
    for q in qa:
        for a in q.anchors:
            needle = normalize(a.text)
            holders = [it.item_id for it in items if needle in it.text]
            if holders != list(q.reference_item_ids):
                raise RuntimeError(f"{name}: anchor {a.text!r} found in {len(holders)} items")


def split_labeled(labeled, seed: int, fraction: float = 0.5):
    """Deterministic shuffled split into (train, test)."""
    rows = list(labeled)
    random.Random(seed).shuffle(rows)
    cut = int(round(len(rows) * fraction))
    return rows[:cut], rows[cut:]


def write_corpus(out_dir: str | Path, corpus: GeneratedCorpus, seed: int) -> dict[str, Path]:
    from .classifier import write_labeled

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "qa": out / "qa.json",
        "questions": out / "questions.tsv",
        "train": out / "questions.train.tsv",
        "test": out / "questions.test.tsv",
    }
    paths["corpus"].write_text(serialize_database(corpus.db), encoding="utf-8")
    paths["qa"].write_text(dump_qa(corpus.qa), encoding="utf-8")
    write_labeled(paths["questions"], corpus.labeled)
    train, test = split_labeled(corpus.labeled, seed)
    write_labeled(paths["train"], train)
    write_labeled(paths["test"], test)
    return paths
